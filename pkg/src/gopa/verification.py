"""Publication board and cheater detection for the randomization phase.

Every user owns a Paillier key and publishes ciphertexts of its input, of
each noise term it exchanged, of its noise sum and of its noisy value.
Randomizers are chained so that the homomorphic coherence checks hold
bit-exactly for honest users:

* ``r_Delta`` is the running product of the noise randomizers (started
  at 1), so ``prod_v E(delta_{u,v}) == E(Delta_u)``;
* ``r_Xtilde = r_X * r_Delta mod N``, so ``E(X_u) * E(Delta_u) == E(Xtilde_u)``.

A public beacon seed then selects, per user ``u``, a subset of
``ceil((1 - beta) d_u)`` neighbours whose noise is revealed in plain text
and cross-checked against both endpoints' ciphertexts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import paillier as pl
from .errors import EncodingRangeError, ParameterError, ProtocolError
from .graph import NetworkGraph, assign_roles, generate_k_out
from .privacy import PrivacyReport, privacy_report
from .protocol import (NOISE_BOUND_SIGMAS, NoiseLedger, PrivateValues, ProtocolState,
                       randomization_phase, simulate_dropout)

CHECK_COHERENCE = "coherence"
CHECK_CROSS = "cross-check"
CHECK_REFUSAL = "refusal"


# --- board ---------------------------------------------------------------

@dataclass(frozen=True)
class BoardRecord:
    offset: int
    user: int
    slot: str
    payload: str


class PublicationBoard:
    """Append-only store of ``user|slot|hex-payload`` records.

    Slots are ``pubkey``, ``X``, ``delta:v``, ``Delta``, ``Xtilde``,
    ``reveal-delta:v`` and ``reveal-r:v``. The ``pubkey`` payload is
    ``<N hex>:<g hex>``; all others are a single big-endian hex integer.
    """

    def __init__(self):
        self.records: List[BoardRecord] = []
        self._index: Dict[Tuple[int, str], int] = {}

    def publish(self, user: int, slot: str, payload) -> int:
        key = (int(user), slot)
        if key in self._index:
            raise ProtocolError(f"user {user} already published slot {slot!r}")
        text = payload if isinstance(payload, str) else f"{int(payload):x}"
        off = len(self.records)
        self.records.append(BoardRecord(off, int(user), slot, text))
        self._index[key] = off
        return off

    def has(self, user: int, slot: str) -> bool:
        return (int(user), slot) in self._index

    def offset(self, user: int, slot: str) -> int:
        try:
            return self._index[(int(user), slot)]
        except KeyError:
            raise ProtocolError(f"user {user} has not published slot {slot!r}") from None

    def payload(self, user: int, slot: str) -> str:
        return self.records[self.offset(user, slot)].payload

    def integer(self, user: int, slot: str) -> int:
        return int(self.payload(user, slot), 16)

    def public_key(self, user: int) -> pl.PublicKey:
        return pl.PublicKey.from_hex(self.payload(user, "pubkey"))

    def ciphertext(self, user: int, slot: str) -> pl.Ciphertext:
        return pl.Ciphertext(self.integer(user, slot), self.public_key(user))

    def revealed_pairs(self) -> Set[Tuple[int, int]]:
        """Unordered pairs whose noise was published in plain text."""
        out = set()
        for rec in self.records:
            if rec.slot.startswith("reveal-delta:"):
                v = int(rec.slot.split(":")[1])
                out.add((min(rec.user, v), max(rec.user, v)))
        return out

    def to_text(self) -> str:
        return "".join(f"{r.user}|{r.slot}|{r.payload}\n" for r in self.records)

    @classmethod
    def from_text(cls, text: str) -> "PublicationBoard":
        board = cls()
        for ln in text.splitlines():
            if not ln.strip():
                continue
            user, slot, payload = ln.split("|")
            board.publish(int(user), slot, payload)
        return board

    def __len__(self):
        return len(self.records)


# --- accusations ---------------------------------------------------------

@dataclass(frozen=True)
class Accusation:
    user: int
    check: str
    evidence: Tuple[int, ...]


@dataclass
class CheaterList:
    accusations: List[Accusation] = field(default_factory=list)

    def add(self, user: int, check: str, evidence: Iterable[int]) -> None:
        self.accusations.append(Accusation(int(user), check, tuple(int(e) for e in evidence)))

    def extend(self, other: "CheaterList") -> "CheaterList":
        self.accusations.extend(other.accusations)
        return self

    @property
    def users(self) -> Set[int]:
        return {a.user for a in self.accusations}

    def __contains__(self, user) -> bool:
        return any(a.user == user for a in self.accusations)

    def __len__(self):
        return len(self.accusations)

    def to_json(self) -> str:
        return json.dumps({"cheaters": sorted(self.users),
                           "accusations": [{"user": a.user, "check": a.check, "evidence": list(a.evidence)}
                                           for a in self.accusations]}, sort_keys=True)


@dataclass
class CheatScript:
    """Deviations injected by malicious users.

    ``asymmetric`` entries ``(u, v, amount)`` make ``u`` use
    ``delta_{u,v} + amount`` while ``v`` keeps ``-delta_{u,v}``; the cheater
    publishes consistently so only the reveal step can catch it.
    ``wrong_delta`` maps a user to an amount added to its published noise
    sum (and to its noisy value). ``refuse`` users decline every reveal.
    ``reveal`` selects what an asymmetric cheater discloses when asked for
    a noise value: the value it actually used, or the agreed one.
    """

    asymmetric: List[Tuple[int, int, float]] = field(default_factory=list)
    wrong_delta: Dict[int, float] = field(default_factory=dict)
    refuse: Set[int] = field(default_factory=set)
    reveal: str = "used"

    @property
    def count(self) -> int:
        return len(self.asymmetric) + len(self.wrong_delta)

    @property
    def cheaters(self) -> Set[int]:
        return {u for u, _, _ in self.asymmetric} | set(self.wrong_delta) | set(self.refuse)

    def validate(self, g: NetworkGraph) -> None:
        if self.reveal not in ("used", "agreed"):
            raise ParameterError(f"unknown reveal strategy {self.reveal!r}")
        seen = set()
        for u, v, _ in self.asymmetric:
            if not g.has_edge(u, v):
                raise ParameterError(f"asymmetric cheat on non-edge ({u}, {v})")
            if (u, v) in seen:
                raise ParameterError(f"duplicate asymmetric cheat on ({u}, {v})")
            seen.add((u, v))
        for u in self.cheaters:
            if not g.malicious[u]:
                raise ParameterError(f"scripted cheater {u} is not malicious")


@dataclass
class UserWallet:
    """A user's private material: key, plaintexts it used and randomizers."""

    user: int
    keypair: pl.PaillierKeypair
    value: int
    deltas: Dict[int, int]
    agreed: Dict[int, int]
    r_x: int
    r_delta: Dict[int, int]
    r_sum: int
    r_noisy: int
    sum_offset: int = 0
    refuses: bool = False
    reveal_used: bool = True

    @property
    def n(self) -> int:
        return self.keypair.n

    @property
    def noise_sum(self) -> int:
        return sum(self.deltas.values())

    @property
    def noisy(self) -> int:
        """Noisy value the user actually carries into the averaging phase."""
        return self.value + self.noise_sum + self.sum_offset

    def reveal_delta(self, v: int) -> Optional[Tuple[int, int]]:
        if self.refuses:
            return None
        d = self.deltas[v] if self.reveal_used else self.agreed[v]
        return d, self.r_delta[v]

    def reveal_r(self, v: int) -> Optional[int]:
        return None if self.refuses else self.r_delta[v]


# --- publication ---------------------------------------------------------

def _int_noise(ledger: NoiseLedger, u: int, v: int, scale_bits: int) -> int:
    d = ledger.get(u, v)
    if ledger.mode == "fixed":
        if ledger.scale_bits != scale_bits:
            raise ParameterError("ledger scale does not match the encoding scale")
        return int(d)
    return int(round(d * 2 ** scale_bits))


def generate_keys(n: int, prime_bits: int = pl.MIN_PRIME_BITS, rng_seed=None) -> Dict[int, pl.PaillierKeypair]:
    """One keypair per user, reproducible per seed."""
    return {u: pl.keygen(prime_bits, rng_seed=None if rng_seed is None else f"{rng_seed}:key:{u}")
            for u in range(n)}


def check_capacity(n_modulus: int, scale_bits: int, value_bound: float, noise_bound: float,
                   d_max: int, extra: float = 0.0) -> None:
    """Static check that every published quantity fits the signed half-range."""
    worst = (value_bound + d_max * noise_bound + extra) * 2 ** scale_bits
    if worst > (n_modulus - 1) // 2:
        raise EncodingRangeError(
            f"values up to {worst:.3g} (scaled) do not fit modulus of {n_modulus.bit_length()} bits")


def publish_phase(g: NetworkGraph, x: PrivateValues, ledger: NoiseLedger,
                  script: Optional[CheatScript] = None, scale_bits: int = pl.DEFAULT_SCALE_BITS,
                  rng_seed=None, keys: Optional[Dict[int, pl.PaillierKeypair]] = None,
                  prime_bits: int = pl.MIN_PRIME_BITS) -> Tuple[PublicationBoard, Dict[int, UserWallet]]:
    """Run the publications of every user around the randomization phase.

    Returns the public board and each user's wallet (kept by the simulator
    to answer reveal requests).
    """
    script = script or CheatScript()
    script.validate(g)
    if keys is None:
        keys = generate_keys(g.n, prime_bits, rng_seed)
    rng = pl._rng(None if rng_seed is None else f"{rng_seed}:publish")
    shift: Dict[Tuple[int, int], int] = {}
    for u, v, amount in script.asymmetric:
        shift[(u, v)] = int(round(amount * 2 ** scale_bits))
    board = PublicationBoard()
    wallets: Dict[int, UserWallet] = {}
    x_int = x.quantised(scale_bits)
    for u in range(g.n):
        kp = keys[u]
        pub = kp.public
        N = pub.n
        nbrs = g.neighbors(u).tolist()
        agreed = {v: _int_noise(ledger, u, v, scale_bits) for v in nbrs}
        used = {v: agreed[v] + shift.get((u, v), 0) for v in nbrs}
        value = int(x_int[u])
        r_x = pl.random_unit(pub, rng)
        r_delta = {v: pl.random_unit(pub, rng) for v in nbrs}
        r_sum = 1
        for v in nbrs:
            r_sum = r_sum * r_delta[v] % N
        r_noisy = r_x * r_sum % N
        offset = int(round(script.wrong_delta.get(u, 0.0) * 2 ** scale_bits))
        w = UserWallet(u, kp, value, used, agreed, r_x, r_delta, r_sum, r_noisy,
                       sum_offset=offset, refuses=u in script.refuse,
                       reveal_used=script.reveal == "used")
        wallets[u] = w

        board.publish(u, "pubkey", pub.to_hex())
        board.publish(u, "X", pl.encrypt(pub, pl.encode_int(value, N), r_x).value)
        for v in nbrs:
            board.publish(u, f"delta:{v}", pl.encrypt(pub, pl.encode_int(used[v], N), r_delta[v]).value)
        published_sum = w.noise_sum + offset
        board.publish(u, "Delta", pl.encrypt(pub, pl.encode_int(published_sum, N), r_sum).value)
        board.publish(u, "Xtilde", pl.encrypt(pub, pl.encode_int(value + published_sum, N), r_noisy).value)
    return board, wallets


def coherence_check(board: PublicationBoard, g: NetworkGraph) -> CheaterList:
    """Homomorphic consistency of each user's noise sum and noisy value."""
    out = CheaterList()
    for u in range(g.n):
        pub = board.public_key(u)
        nbrs = g.neighbors(u).tolist()
        parts = [board.ciphertext(u, f"delta:{v}") for v in nbrs]
        c_sum = board.ciphertext(u, "Delta")
        c_x = board.ciphertext(u, "X")
        c_noisy = board.ciphertext(u, "Xtilde")
        expect_sum = pl.hom_sum(parts, pub)
        expect_noisy = pl.hom_add(c_x, c_sum)
        if expect_sum.value != c_sum.value or expect_noisy.value != c_noisy.value:
            ev = [board.offset(u, f"delta:{v}") for v in nbrs]
            ev += [board.offset(u, s) for s in ("X", "Delta", "Xtilde")]
            out.add(u, CHECK_COHERENCE, ev)
    return out


def reveal_subset_size(beta: float, degree: int) -> int:
    """``ceil((1 - beta) d)``, robust to floating-point noise in ``1 - beta``."""
    return min(degree, max(0, math.ceil((1.0 - beta) * degree - 1e-9)))


def reveal_subsets(g: NetworkGraph, beta: float, beacon_seed) -> Dict[int, List[int]]:
    """Neighbours each user must reveal; anyone can recompute them from the beacon."""
    if not 0.0 <= beta <= 1.0:
        raise ParameterError("beta must lie in [0, 1]")
    out = {}
    for u in range(g.n):
        nbrs = g.neighbors(u)
        size = reveal_subset_size(beta, len(nbrs))
        rng = np.random.default_rng([int(beacon_seed), u])
        out[u] = sorted(rng.choice(nbrs, size=size, replace=False).tolist()) if size else []
    return out


def reveal_and_cross_check(board: PublicationBoard, g: NetworkGraph, wallets: Dict[int, UserWallet],
                           beta: float, rng_seed=0) -> CheaterList:
    """Reveal a public random subset of noise terms and check both endpoints.

    A revealer whose own ciphertext does not match its reveal is flagged
    alone. When the reveal is self-consistent but the partner's ciphertext
    is not an encryption of the negated value, both endpoints are flagged.
    Declining a reveal is an immediate flag.
    """
    out = CheaterList()
    subsets = reveal_subsets(g, beta, rng_seed)
    for u in range(g.n):
        for v in subsets[u]:
            got = wallets[u].reveal_delta(v)
            if got is None:
                out.add(u, CHECK_REFUSAL, [board.offset(u, f"delta:{v}")])
                continue
            d, r_u = got
            pub_u = board.public_key(u)
            off_d = board.publish(u, f"reveal-delta:{v}", pl.encode_int(d, pub_u.n))
            if not board.has(u, f"reveal-r:{v}"):
                board.publish(u, f"reveal-r:{v}", r_u)
            r_v = wallets[v].reveal_r(u)
            if r_v is None and not board.has(v, f"reveal-r:{u}"):
                out.add(v, CHECK_REFUSAL, [off_d])
                continue
            if not board.has(v, f"reveal-r:{u}"):
                board.publish(v, f"reveal-r:{u}", r_v)
            r_u = board.integer(u, f"reveal-r:{v}")
            r_v = board.integer(v, f"reveal-r:{u}")
            ev = [board.offset(u, f"delta:{v}"), off_d, board.offset(u, f"reveal-r:{v}"),
                  board.offset(v, f"delta:{u}"), board.offset(v, f"reveal-r:{u}")]
            own = _matches(board, u, f"delta:{v}", d, r_u)
            if not own:
                out.add(u, CHECK_CROSS, ev)
                continue
            if not _matches(board, v, f"delta:{u}", -d, r_v):
                out.add(u, CHECK_CROSS, ev)
                out.add(v, CHECK_CROSS, ev)
    return out


def _matches(board: PublicationBoard, user: int, slot: str, plain: int, r: int) -> bool:
    pub = board.public_key(user)
    try:
        m = pl.encode_int(plain, pub.n)
        expect = pl.encrypt(pub, m, r)
    except (EncodingRangeError, ParameterError):
        return False
    return expect.value == board.integer(user, slot)


def detection_probability(beta: float, C: int) -> float:
    """Lower bound ``1 - beta^(2C)`` on catching a user who cheated ``C`` times."""
    if not 0.0 <= beta <= 1.0:
        raise ParameterError("beta must lie in [0, 1]")
    if C < 0:
        raise ParameterError("cheat count must be non-negative")
    return 1.0 - beta ** (2 * C)


# --- end-to-end ----------------------------------------------------------

@dataclass
class VerifiedConfig:
    n: int = 12
    k: int = 5
    f: float = 0.0
    sigma_x: float = 1.0
    sigma_delta: float = 1.0
    beta: float = 0.5
    scale_bits: int = pl.DEFAULT_SCALE_BITS
    prime_bits: int = pl.MIN_PRIME_BITS
    seed: int = 0
    script: Optional[CheatScript] = None
    graph: Optional[NetworkGraph] = None
    values: Optional[PrivateValues] = None
    keys: Optional[Dict[int, pl.PaillierKeypair]] = None
    malicious: Optional[Sequence[int]] = None
    compute_privacy: bool = True


@dataclass
class VerifiedResult:
    """Outcome of a verified run.

    ``average`` is computed from the noisy values of the users that were
    not flagged, after they roll back noise exchanged with flagged users.
    ``exact_average`` is the fixed-point average of the same users' inputs.
    """

    average: float
    cheaters: CheaterList
    privacy: Optional[PrivacyReport]
    exact_average: float
    average_fraction: Fraction
    exact_fraction: Fraction
    survivors: np.ndarray
    board: PublicationBoard
    graph: NetworkGraph
    values: PrivateValues


def run_verified_protocol(config: VerifiedConfig) -> VerifiedResult:
    """Randomize in fixed point, publish, verify, then average the survivors."""
    c = config
    seeds = np.random.SeedSequence(c.seed).spawn(5)
    ints = [int(s.generate_state(1)[0]) for s in seeds]
    g = c.graph
    if g is None:
        g = generate_k_out(c.n, c.k, ints[0])
        g = assign_roles(g, c.f, ints[1], malicious=c.malicious)
    elif c.malicious is not None:
        g = assign_roles(g, 0.0, malicious=c.malicious)
    x = c.values if c.values is not None else PrivateValues.gaussian(g.n, c.sigma_x, ints[2])
    script = c.script or CheatScript()
    keys = c.keys if c.keys is not None else generate_keys(g.n, c.prime_bits, ints[3])
    extra = max([abs(a) for _, _, a in script.asymmetric] + [abs(a) for a in script.wrong_delta.values()] + [0.0])
    d_max = int(g.degrees.max()) if g.num_edges else 0
    check_capacity(min(kp.n for kp in keys.values()), c.scale_bits, x.bound,
                   NOISE_BOUND_SIGMAS * c.sigma_delta, d_max, extra * max(1, d_max))

    state, ledger = randomization_phase(g, x, c.sigma_delta, ints[4], mode="fixed", scale_bits=c.scale_bits)
    board, wallets = publish_phase(g, x, ledger, script, c.scale_bits, rng_seed=ints[4], keys=keys)
    cheaters = coherence_check(board, g)
    cheaters.extend(reveal_and_cross_check(board, g, wallets, c.beta, rng_seed=ints[4]))

    # the users' actual noisy values, including any scripted deviation
    held = ProtocolState(noisy=np.array([wallets[u].noisy for u in range(g.n)], dtype=object),
                         noise_sums=np.array([wallets[u].noise_sum for u in range(g.n)], dtype=object),
                         reference=np.array([wallets[u].value for u in range(g.n)], dtype=object),
                         mode="fixed", scale_bits=c.scale_bits)
    flagged = sorted(cheaters.users)
    own_ledger = _WalletLedger(wallets)
    outcome = simulate_dropout(held, own_ledger, g, flagged, policy="rollback")
    count = len(outcome.survivors)
    denom = count * 2 ** c.scale_bits
    total = sum(int(v) for v in outcome.state.noisy)
    exact = sum(int(v) for v in outcome.state.reference)
    avg_frac = Fraction(total, denom) if count else Fraction(0)
    exact_frac = Fraction(exact, denom) if count else Fraction(0)

    report = None
    if c.compute_privacy and g.honest.any():
        report = privacy_report(g.without_edges(board.revealed_pairs()), c.sigma_x, c.sigma_delta)
    return VerifiedResult(float(avg_frac), cheaters, report, float(exact_frac), avg_frac, exact_frac,
                          outcome.survivors, board, g, x)


class _WalletLedger:
    """Ledger view over the noise each user actually used (not the agreed one)."""

    def __init__(self, wallets: Dict[int, UserWallet]):
        self._w = wallets

    def __contains__(self, pair) -> bool:
        u, v = pair
        return v in self._w[u].deltas

    def get(self, u: int, v: int) -> int:
        return self._w[u].deltas[v]


@dataclass
class DetectionStats:
    beta: float
    C: int
    trials: int
    detected: int
    honest_accused: int
    bound: float

    @property
    def rate(self) -> float:
        return self.detected / self.trials if self.trials else 0.0

    @property
    def margin(self) -> float:
        """Three binomial standard deviations at the bound."""
        p = self.bound
        return 3.0 * math.sqrt(max(p * (1 - p), 0.0) / self.trials) if self.trials else 0.0


def single_cheater_script(g: NetworkGraph, cheater: int, C: int, amount: float = 1.0) -> CheatScript:
    """``C`` asymmetric cheats by ``cheater`` on its first ``C`` neighbours."""
    nbrs = g.neighbors(cheater).tolist()
    if C > len(nbrs):
        raise ParameterError(f"user {cheater} has only {len(nbrs)} neighbours, cannot cheat {C} times")
    return CheatScript(asymmetric=[(cheater, v, amount) for v in nbrs[:C]])


def detection_experiment(g: NetworkGraph, script: CheatScript, beta: float, trials: int,
                         seed: int = 0, keys: Optional[Dict[int, pl.PaillierKeypair]] = None,
                         sigma_x: float = 1.0, sigma_delta: float = 1.0,
                         scale_bits: int = pl.DEFAULT_SCALE_BITS,
                         prime_bits: int = pl.MIN_PRIME_BITS) -> DetectionStats:
    """Monte-Carlo detection rate of a fixed cheat script.

    Keys are generated once and reused; each trial draws fresh inputs,
    noise, randomizers and beacon. A trial detects when at least one
    scripted cheater is accused.
    """
    if keys is None:
        keys = generate_keys(g.n, prime_bits, f"{seed}:detect")
    cheaters = script.cheaters
    detected = accused_honest = 0
    for t in range(trials):
        res = run_verified_protocol(VerifiedConfig(
            sigma_x=sigma_x, sigma_delta=sigma_delta, beta=beta, scale_bits=scale_bits,
            seed=int(np.random.SeedSequence([seed, t]).generate_state(1)[0]),
            script=script, graph=g, keys=keys, compute_privacy=False))
        accused = res.cheaters.users
        if accused & cheaters:
            detected += 1
        if not cheaters and accused:
            accused_honest += 1
    return DetectionStats(beta, script.count, trials, detected, accused_honest,
                          detection_probability(beta, script.count))
