"""Randomization phase, randomized gossip averaging and convergence accounting.

Two arithmetic modes are supported. ``"float"`` keeps everything in
float64. ``"fixed"`` stores values as integers scaled by ``2**scale_bits``;
noise is quantised once when drawn, so pairwise cancellation and gossip
updates conserve the network sum exactly.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .errors import NumericalError, ParameterError, ProtocolError
from .graph import NetworkGraph, is_connected, laplacian, lambda2

MODES = ("float", "fixed")
DEFAULT_SCALE_BITS = 32
# Noise bound used by the averaging-time bound: B_delta = NOISE_BOUND_SIGMAS * sigma_delta.
NOISE_BOUND_SIGMAS = 6.0
# Largest magnitude allowed for fixed-point values held in int64 arrays.
_INT64_SAFE = 2 ** 62


@dataclass(frozen=True)
class PrivateValues:
    """Private inputs ``X`` with a public bound ``|X_u| <= bound``."""

    values: np.ndarray
    bound: float

    def __post_init__(self):
        x = np.asarray(self.values, dtype=float).copy()
        x.setflags(write=False)
        object.__setattr__(self, "values", x)
        if x.ndim != 1:
            raise ParameterError("private values must be a vector")
        if not self.bound > 0:
            raise ParameterError("value bound must be positive")
        if np.any(np.abs(x) > self.bound):
            raise ParameterError(f"private value exceeds bound {self.bound}")

    @classmethod
    def gaussian(cls, n: int, sigma: float = 1.0, rng_seed=None, bound: Optional[float] = None):
        """Draw ``X_u ~ N(0, sigma^2)``; the bound defaults to ``max |X_u|``."""
        x = np.random.default_rng(rng_seed).normal(0.0, sigma, size=n)
        if bound is None:
            bound = float(np.max(np.abs(x))) if n else 1.0
            bound = bound or 1.0
        else:
            x = np.clip(x, -bound, bound)
        return cls(x, bound)

    def __len__(self):
        return len(self.values)

    @property
    def average(self) -> float:
        return float(np.mean(self.values))

    def quantised(self, scale_bits: int) -> np.ndarray:
        return quantise(self.values, scale_bits)


def quantise(x, scale_bits: int) -> np.ndarray:
    """Round ``x * 2**scale_bits`` to the nearest integer (half to even)."""
    q = np.rint(np.asarray(x, dtype=float) * float(2 ** scale_bits))
    if np.any(np.abs(q) >= _INT64_SAFE):
        raise ParameterError("fixed-point value too large for int64 state")
    return q.astype(np.int64)


class NoiseLedger:
    """Antisymmetric record of the noise exchanged on each edge.

    Entries are stored once per unordered pair under ``(u, v)`` with
    ``u < v``; :meth:`get` returns ``-delta`` for the reversed pair.
    """

    def __init__(self, sigma: float, mode: str = "float", scale_bits: int = DEFAULT_SCALE_BITS,
                 bound: Optional[float] = None):
        self.sigma = float(sigma)
        self.mode = mode
        self.scale_bits = scale_bits
        self.bound = NOISE_BOUND_SIGMAS * self.sigma if bound is None else bound
        self._delta: Dict[Tuple[int, int], float] = {}

    def record(self, u: int, v: int, delta) -> None:
        if u == v:
            raise ProtocolError("cannot exchange noise with oneself")
        key, sign = ((u, v), 1) if u < v else ((v, u), -1)
        if key in self._delta:
            raise ProtocolError(f"noise for pair {key} already recorded")
        self._delta[key] = sign * delta

    def get(self, u: int, v: int):
        if u < v:
            return self._delta[(u, v)]
        return -self._delta[(v, u)]

    def __contains__(self, pair) -> bool:
        u, v = pair
        return (min(u, v), max(u, v)) in self._delta

    def __len__(self) -> int:
        return len(self._delta)

    def items(self):
        return self._delta.items()

    def pairs(self) -> List[Tuple[int, int]]:
        return list(self._delta)

    def as_real(self, value) -> float:
        """Convert a stored entry to a real number."""
        if self.mode == "fixed":
            return value / float(2 ** self.scale_bits)
        return float(value)


@dataclass
class ProtocolState:
    """Values held by the users during one protocol run.

    ``reference`` keeps the private inputs (in the state's arithmetic) so
    that the simulator can report errors; it is never used by the
    protocol updates themselves.
    """

    noisy: np.ndarray
    noise_sums: np.ndarray
    reference: np.ndarray
    mode: str = "float"
    scale_bits: int = DEFAULT_SCALE_BITS
    t: int = 0
    trace: List[Tuple[int, float, float]] = field(default_factory=list)

    def copy(self) -> "ProtocolState":
        return replace(self, noisy=self.noisy.copy(), noise_sums=self.noise_sums.copy(),
                       trace=list(self.trace))

    @property
    def n(self) -> int:
        return len(self.noisy)

    def real_values(self) -> np.ndarray:
        if self.mode == "fixed":
            return self.noisy / float(2 ** self.scale_bits)
        return np.asarray(self.noisy, dtype=float)

    def real_reference(self) -> np.ndarray:
        if self.mode == "fixed":
            return self.reference / float(2 ** self.scale_bits)
        return np.asarray(self.reference, dtype=float)

    def sum_noisy(self):
        return int(self.noisy.sum()) if self.mode == "fixed" else float(np.sum(self.noisy))

    def sum_reference(self):
        return int(self.reference.sum()) if self.mode == "fixed" else float(np.sum(self.reference))

    def relative_error(self) -> float:
        """``||X~(t) - X_avg 1|| / ||X||``."""
        x = self.real_reference()
        norm = np.linalg.norm(x)
        dev = self.real_values() - x.mean()
        return float(np.linalg.norm(dev) / norm) if norm > 0 else float(np.linalg.norm(dev))

    def sum_drift(self) -> float:
        """``|sum X~(t) - sum X| / sum |X|`` (0 when X is all zeros)."""
        diff = self.sum_noisy() - self.sum_reference()
        scale = float(np.abs(self.real_reference()).sum())
        if self.mode == "fixed":
            diff = diff / float(2 ** self.scale_bits)
        return abs(float(diff)) / scale if scale > 0 else abs(float(diff))


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}, got {mode!r}")


def randomization_phase(g: NetworkGraph, x: PrivateValues, sigma_delta: float,
                        rng_seed=None, mode: str = "float",
                        scale_bits: int = DEFAULT_SCALE_BITS) -> Tuple[ProtocolState, NoiseLedger]:
    """Pairwise noise exchange on every edge.

    For each edge ``(u, v)`` with ``u < v`` a single ``delta ~ N(0,
    sigma_delta^2)`` is drawn; ``u`` adds it and ``v`` subtracts it.
    """
    _check_mode(mode)
    if sigma_delta < 0:
        raise ParameterError("sigma_delta must be non-negative")
    if len(x) != g.n:
        raise ParameterError("private values do not match the graph size")
    rng = np.random.default_rng(rng_seed)
    deltas = rng.normal(0.0, 1.0, size=g.num_edges) * sigma_delta
    ledger = NoiseLedger(sigma_delta, mode, scale_bits)
    if mode == "fixed":
        deltas = quantise(deltas, scale_bits)
        ref = x.quantised(scale_bits)
        sums = np.zeros(g.n, dtype=np.int64)
    else:
        ref = np.array(x.values, dtype=float)
        sums = np.zeros(g.n, dtype=float)
    for (u, v), d in zip(g.edges.tolist(), deltas.tolist()):
        ledger.record(u, v, d)
    if g.num_edges:
        np.add.at(sums, g.edges[:, 0], deltas)
        np.subtract.at(sums, g.edges[:, 1], deltas)
    noisy = ref + sums
    if mode == "fixed" and np.any(np.abs(noisy) >= _INT64_SAFE):
        raise ParameterError("noisy values overflow fixed-point state")
    state = ProtocolState(noisy=noisy, noise_sums=sums, reference=ref.copy(), mode=mode,
                          scale_bits=scale_bits)
    return state, ledger


def initial_state(x: PrivateValues, mode: str = "float",
                  scale_bits: int = DEFAULT_SCALE_BITS) -> ProtocolState:
    """State for plain (non-private) gossip starting from ``X`` itself."""
    _check_mode(mode)
    if mode == "fixed":
        ref = x.quantised(scale_bits)
        zero = np.zeros_like(ref)
    else:
        ref = np.array(x.values, dtype=float)
        zero = np.zeros_like(ref)
    return ProtocolState(noisy=ref.copy(), noise_sums=zero, reference=ref, mode=mode,
                         scale_bits=scale_bits)


def _average_pair(a, b, fixed: bool):
    if fixed:
        s = a + b
        lo = s // 2
        return lo, s - lo
    m = 0.5 * (a + b)
    return m, m


def gossip_step(state: ProtocolState, edge: Tuple[int, int],
                g: Optional[NetworkGraph] = None) -> ProtocolState:
    """One averaging update on ``edge``; returns a new state.

    In fixed mode the pair receives ``floor(s/2)`` and ``s - floor(s/2)``
    so the integer sum is unchanged.
    """
    u, v = int(edge[0]), int(edge[1])
    if g is not None and not g.has_edge(u, v):
        raise ProtocolError(f"edge ({u}, {v}) is not in the graph")
    if u == v or not (0 <= u < state.n and 0 <= v < state.n):
        raise ProtocolError(f"invalid edge ({u}, {v})")
    out = state.copy()
    a, b = _average_pair(out.noisy[u], out.noisy[v], out.mode == "fixed")
    out.noisy[u], out.noisy[v] = a, b
    out.t += 1
    return out


def run_averaging(state: ProtocolState, g: NetworkGraph, max_iters: int, rng_seed=None,
                  record_every: int = 50) -> ProtocolState:
    """Apply ``max_iters`` uniformly drawn edge activations.

    Every ``record_every`` steps (and at the start and end) a
    ``(t, rel_error, sum_drift)`` row is appended to the returned state's
    trace. The input state is not modified.
    """
    if max_iters < 0:
        raise ParameterError("max_iters must be non-negative")
    if record_every < 1:
        raise ParameterError("record_every must be positive")
    if state.n != g.n:
        raise ParameterError("state and graph sizes differ")
    out = state.copy()
    if not out.trace or out.trace[-1][0] != out.t:
        out.trace.append((out.t, out.relative_error(), out.sum_drift()))
    if max_iters == 0:
        return out
    if g.num_edges == 0:
        raise ProtocolError("cannot gossip on a graph without edges")
    rng = np.random.default_rng(rng_seed)
    fixed = out.mode == "fixed"
    vals = out.noisy.tolist()
    us = g.edges[:, 0].tolist()
    vs = g.edges[:, 1].tolist()
    done = 0
    chunk = 1 << 16
    while done < max_iters:
        step = min(chunk, max_iters - done)
        picks = rng.integers(0, g.num_edges, size=step).tolist()
        for i, e in enumerate(picks):
            u, v = us[e], vs[e]
            if fixed:
                s = vals[u] + vals[v]
                vals[u] = s // 2
                vals[v] = s - vals[u]
            else:
                vals[u] = vals[v] = 0.5 * (vals[u] + vals[v])
            t = done + i + 1
            if t % record_every == 0 and t != max_iters:
                out.noisy = np.array(vals, dtype=out.noisy.dtype)
                out.t = state.t + t
                out.trace.append((out.t, out.relative_error(), out.sum_drift()))
        done += step
    out.noisy = np.array(vals, dtype=out.noisy.dtype)
    out.t = state.t + max_iters
    out.trace.append((out.t, out.relative_error(), out.sum_drift()))
    return out


def trace_csv(state: ProtocolState, method: Optional[str] = None) -> str:
    """Trace as CSV text with columns ``t,rel_error,sum_drift`` (+ ``method``)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["t", "rel_error", "sum_drift"] + (["method"] if method else [])
    w.writerow(head)
    for t, err, drift in state.trace:
        row = [t, repr(float(err)), repr(float(drift))]
        w.writerow(row + ([method] if method else []))
    return buf.getvalue()


# --- convergence accounting ----------------------------------------------

def convergence_factor(g: NetworkGraph) -> float:
    """``C_G = 1 - lambda2(L) / |E|``."""
    if g.num_edges == 0:
        return 1.0
    return 1.0 - lambda2(laplacian(g)) / g.num_edges


@dataclass(frozen=True)
class AveragingTimeBound:
    """Worst-case tau-averaging time of the noisy gossip phase.

    ``degenerate`` is set when ``C_G`` is not in ``(0, 1)`` and had to be
    floored at machine epsilon.
    """

    iterations: float
    c_g: float
    lambda2: float
    degenerate: bool = False

    def __float__(self):
        return float(self.iterations)


def tau_averaging_time_bound(g: NetworkGraph, tau: float, B_X: float, B_delta: float) -> AveragingTimeBound:
    """``3 log(2 B_delta (d_max + 3) / (tau B_X)) / log(1 / C_G)``."""
    if not 0 < tau < 1:
        raise ParameterError("tau must be in (0, 1)")
    if B_X <= 0 or B_delta <= 0:
        raise ParameterError("B_X and B_delta must be positive")
    lam = lambda2(laplacian(g)) if g.num_edges else 0.0
    if lam <= 0 or not is_connected(g):
        raise NumericalError("bound undefined: graph is disconnected (lambda2 = 0, C_G = 1)")
    c_g = 1.0 - lam / g.num_edges
    d_max = int(g.degrees.max())
    numerator = 3.0 * math.log(2.0 * B_delta * (d_max + 3) / (tau * B_X))
    eps = np.finfo(float).eps
    if c_g <= eps:
        iters = max(1, math.ceil(numerator / math.log(1.0 / eps)))
        return AveragingTimeBound(float(iters), c_g, lam, degenerate=True)
    return AveragingTimeBound(numerator / math.log(1.0 / c_g), c_g, lam)


@dataclass
class BatchRun:
    """Result of :func:`batched_gossip`.

    ``hits[r]`` is the first iteration at which trial ``r`` has relative
    error below the threshold (``inf`` if never within the budget).
    ``times`` / ``errors`` hold the recorded relative-error trace, one
    column per trial.
    """

    hits: np.ndarray
    times: np.ndarray
    errors: np.ndarray
    final: np.ndarray


def batched_gossip(states: np.ndarray, reference: np.ndarray, g: NetworkGraph, max_iters: int,
                   threshold: Optional[float] = None, record_every: Optional[int] = None,
                   shared_edges: bool = False, stop_when_crossed: bool = True,
                   rng_seed=None) -> BatchRun:
    """Run gossip trials side by side (one column of ``states`` per trial).

    The squared deviation ``sum (x - X_avg)^2`` of each trial is tracked
    incrementally, each step lowering it by ``(x_u - x_v)^2 / 2``, which
    times threshold crossings to the exact iteration. It is recomputed
    from scratch at each apparent crossing, at each trace point and every
    few thousand steps, so round-off cannot accumulate into the results.

    Args:
        states: ``(n, R)`` starting values.
        reference: ``(n, R)`` private values ``X`` of each trial (for
            ``X_avg`` and the ``||X||`` normaliser).
        g: topology shared by all trials.
        max_iters: iteration budget.
        threshold: relative error level to time, if any.
        record_every: trace interval; ``None`` records nothing.
        shared_edges: draw one edge per step for all trials, so columns
            differ only by their starting values.
        stop_when_crossed: stop early once every trial crossed the
            threshold and no trace is being recorded.
    """
    x = np.array(states, dtype=float, copy=True)
    ref = np.asarray(reference, dtype=float)
    if x.ndim == 1:
        x, ref = x[:, None], ref[:, None]
    _, R = x.shape
    avg = ref.mean(axis=0)
    norm = np.sqrt((ref ** 2).sum(axis=0))
    norm[norm == 0] = 1.0
    target = -1.0 if threshold is None else threshold ** 2 * norm ** 2
    dev2 = ((x - avg) ** 2).sum(axis=0)
    hit = np.full(R, np.inf)
    hit[dev2 < target] = 0
    times, errors = [0], [np.sqrt(dev2) / norm]
    cols = np.arange(R)
    us, vs = g.edges[:, 0], g.edges[:, 1]
    rng = np.random.default_rng(rng_seed)
    t = 0
    chunk = 4096
    while t < max_iters:
        if stop_when_crossed and record_every is None and threshold is not None and not np.isinf(hit).any():
            break
        step = min(chunk, max_iters - t)
        if shared_edges:
            picks = rng.integers(0, g.num_edges, size=step)
        else:
            picks = rng.integers(0, g.num_edges, size=(step, R))
        for i in range(step):
            e = picks[i]
            if shared_edges:
                a, b = x[us[e]].copy(), x[vs[e]].copy()
                m = 0.5 * (a + b)
                x[us[e]] = m
                x[vs[e]] = m
            else:
                a, b = x[us[e], cols], x[vs[e], cols]
                m = 0.5 * (a + b)
                x[us[e], cols] = m
                x[vs[e], cols] = m
            dev2 -= 0.5 * (a - b) ** 2
            now = t + i + 1
            if threshold is not None:
                crossed = (dev2 < target) & np.isinf(hit)
                if crossed.any():
                    # confirm against the exact deviation before timing the crossing
                    idx = np.flatnonzero(crossed)
                    dev2[idx] = ((x[:, idx] - avg[idx]) ** 2).sum(axis=0)
                    hit[idx[dev2[idx] < target[idx]]] = now
            if record_every is not None and now % record_every == 0:
                dev2 = ((x - avg) ** 2).sum(axis=0)
                times.append(now)
                errors.append(np.sqrt(dev2) / norm)
        t += step
        dev2 = ((x - avg) ** 2).sum(axis=0)
    return BatchRun(hit, np.array(times), np.array(errors), x)


def empirical_tau_averaging_time(g: NetworkGraph, tau: float, sigma_x: float, sigma_delta: float,
                                 trials: int = 100, max_iters: Optional[int] = None,
                                 rng_seed=None, value_bound: Optional[float] = None,
                                 noise_bound: Optional[float] = None) -> float:
    """Smallest ``t`` at which the failure frequency over trials is at most ``tau``.

    Each trial draws fresh private values, noise and edge activations. A
    trial fails at ``t`` when its relative error is still ``>= tau``.
    Values and noise are clipped to ``value_bound`` / ``noise_bound`` when
    given, so that those bounds hold exactly.
    """
    if not 0 < tau < 1:
        raise ParameterError("tau must be in (0, 1)")
    if trials < 1:
        raise ParameterError("trials must be positive")
    ss = np.random.SeedSequence(rng_seed)
    s_vals, s_noise, s_gossip = (np.random.default_rng(s) for s in ss.spawn(3))
    X = s_vals.normal(0.0, sigma_x, size=(g.n, trials))
    Z = s_noise.normal(0.0, sigma_delta, size=(g.num_edges, trials))
    if value_bound is not None:
        X = np.clip(X, -value_bound, value_bound)
    if noise_bound is not None:
        Z = np.clip(Z, -noise_bound, noise_bound)
    noisy = X.copy()
    np.add.at(noisy, g.edges[:, 0], Z)
    np.subtract.at(noisy, g.edges[:, 1], Z)
    if max_iters is None:
        max_iters = 50 * g.num_edges * max(1, g.n)
    hit = batched_gossip(noisy, X, g, max_iters, threshold=tau, rng_seed=s_gossip).hits
    allowed = math.floor(tau * trials)
    # failure frequency at t is #{hit > t} / trials; need at most tau * trials failures
    order = np.sort(hit)
    return float(order[trials - allowed - 1]) if allowed < trials else 0.0


# --- drop out ------------------------------------------------------------

@dataclass
class DropoutOutcome:
    """Result of removing users after the randomization phase.

    ``bias`` is ``sum X~ - sum X`` over the survivors, in real units.
    """

    state: ProtocolState
    survivors: np.ndarray
    bias: float


def simulate_dropout(state: ProtocolState, ledger: NoiseLedger, g: NetworkGraph,
                     dropouts: Iterable[int], policy: str = "residual") -> DropoutOutcome:
    """Remove ``dropouts`` from a randomized state.

    ``residual`` leaves the noise survivors exchanged with dropped users in
    place, biasing the sum by a zero-mean amount. ``rollback`` makes every
    survivor subtract that noise, restoring the survivors' exact sum.
    The returned state is indexed like ``g.induced_subgraph(survivors)``.
    """
    if policy not in ("residual", "rollback"):
        raise ParameterError(f"unknown dropout policy {policy!r}")
    dropped = set(int(u) for u in dropouts)
    if any(not 0 <= u < g.n for u in dropped):
        raise ParameterError("dropout id out of range")
    survivors = np.array([u for u in range(g.n) if u not in dropped], dtype=np.int64)
    noisy = state.noisy.copy()
    sums = state.noise_sums.copy()
    if policy == "rollback":
        for u in survivors.tolist():
            for v in g.neighbors(u).tolist():
                if v in dropped and (u, v) in ledger:
                    d = ledger.get(u, v)
                    noisy[u] -= d
                    sums[u] -= d
    out = replace(state, noisy=noisy[survivors], noise_sums=sums[survivors],
                  reference=state.reference[survivors].copy(), trace=[])
    bias = out.sum_noisy() - out.sum_reference()
    if out.mode == "fixed":
        bias = bias / float(2 ** out.scale_bits)
    return DropoutOutcome(out, survivors, float(bias))
