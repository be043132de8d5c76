"""Comparison points: local-DP gossip and trusted-server Paillier averaging."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import paillier as pl
from .errors import EncodingRangeError, ParameterError
from .graph import NetworkGraph
from .protocol import PrivateValues, initial_state, run_averaging


@dataclass(frozen=True)
class LdpConfig:
    """Laplace mechanism with budget ``epsilon`` on values bounded by ``bound``."""

    epsilon: float
    bound: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ParameterError("epsilon must be positive")
        if not self.bound > 0:
            raise ParameterError("bound must be positive")

    @property
    def scale(self) -> float:
        """Laplace scale ``b = 2 B / epsilon``."""
        return 2.0 * self.bound / self.epsilon


def _check_bound(x: PrivateValues, cfg: LdpConfig) -> None:
    if np.any(np.abs(x.values) > cfg.bound):
        raise ParameterError(f"private value exceeds the LDP bound {cfg.bound}")


def ldp_perturb(x: PrivateValues, cfg: LdpConfig, rng_seed=None) -> np.ndarray:
    """Each value plus independent Laplace(``b``) noise."""
    _check_bound(x, cfg)
    rng = np.random.default_rng(rng_seed)
    return x.values + rng.laplace(0.0, cfg.scale, size=len(x))


def ldp_rmse_formula(cfg: LdpConfig, n: int) -> float:
    """RMSE of the perturbed average, ``b * sqrt(2 / n)``."""
    if n < 1:
        raise ParameterError("n must be positive")
    return cfg.scale * math.sqrt(2.0 / n)


def ldp_empirical_rmse(x: PrivateValues, cfg: LdpConfig, trials: int, rng_seed=None,
                       batch: int = 100) -> float:
    """Monte-Carlo RMSE of the one-shot perturbed average over ``trials`` draws."""
    _check_bound(x, cfg)
    rng = np.random.default_rng(rng_seed)
    n = len(x)
    sq = 0.0
    done = 0
    while done < trials:
        b = min(batch, trials - done)
        err = rng.laplace(0.0, cfg.scale, size=(b, n)).mean(axis=1)
        sq += float(np.sum(err ** 2))
        done += b
    return math.sqrt(sq / trials)


def ldp_gossip(x: PrivateValues, cfg: LdpConfig, g: NetworkGraph, max_iters: int, rng_seed=None,
               record_every: int = 1000):
    """Full gossip run on the perturbed values.

    The trace's ``rel_error`` is measured against the perturbed values, so
    it tends to zero while the estimate itself stays off by the LDP noise.
    Returns ``(final_state, perturbed_average)``.
    """
    ss = np.random.SeedSequence(rng_seed)
    s_noise, s_gossip = ss.spawn(2)
    noisy = ldp_perturb(x, cfg, np.random.default_rng(s_noise))
    bound = float(np.max(np.abs(noisy))) or 1.0
    state = initial_state(PrivateValues(noisy, bound))
    out = run_averaging(state, g, max_iters, np.random.default_rng(s_gossip), record_every)
    return out, float(np.mean(noisy))


def central_paillier_average(x: PrivateValues, scale_bits: int = pl.DEFAULT_SCALE_BITS,
                             rng_seed=None, prime_bits: int = pl.MIN_PRIME_BITS,
                             keypair: Optional[pl.PaillierKeypair] = None) -> float:
    """Server key, per-user encryption, third-party product, server decryption.

    The result equals the fixed-point average of the inputs exactly.
    """
    rng = pl._rng(rng_seed)
    kp = keypair or pl.keygen(prime_bits, rng)
    N = kp.n
    n = len(x)
    # the encoded sum must not wrap around the signed half-range
    worst = n * (x.bound * 2 ** scale_bits + 1)
    if worst > (N - 1) // 2:
        raise EncodingRangeError("sum of encoded values exceeds the signed half-range of N")
    cts = [pl.encrypt(kp.public, pl.encode_fixed(v, scale_bits, N), rng_seed=rng) for v in x.values.tolist()]
    total = pl.hom_sum(cts, kp.public)
    return pl.decode_fixed(pl.decrypt(kp, total), scale_bits, N) / n
