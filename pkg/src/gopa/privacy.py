"""Exact Bayesian privacy of the randomization phase.

Under Gaussian priors ``X_u ~ N(0, sigma_x^2)`` and Gaussian pairwise noise
``N(0, sigma_delta^2)``, the fraction of prior variance the adversary keeps
about an honest user is ``rho_u = 1 - e_u^T M e_u`` with the graph smoothing
operator ``M = (I + alpha L_H)^{-1}``, ``alpha = sigma_delta^2 / sigma_x^2``
and ``L_H`` the Laplacian of the honest subgraph. :func:`conditional_variance_oracle`
computes the same quantity by direct Gaussian conditioning, without going
through ``M``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import cg

from .errors import DomainError, NumericalError, ParameterError
from .graph import NetworkGraph, honest_subgraph, laplacian, lambda_max

DIRECT_SOLVE_LIMIT = 2000
CG_RTOL = 1e-10


class SmoothingOperator:
    """Applies ``M = (I + alpha L)^{-1}`` without forming the inverse.

    Systems up to :data:`DIRECT_SOLVE_LIMIT` nodes are Cholesky-factored
    once; larger ones are solved by conjugate gradients. ``condition``
    is ``1 + alpha * lambda_max(L)``.

    ``M`` fixes vectors that are constant on each connected component, so
    that part of the input is passed through exactly and only the rest is
    solved for. The solved part shrinks like ``1 / alpha``, which keeps the
    absolute error small even when ``I + alpha L`` is badly conditioned.
    """

    def __init__(self, L, alpha: float, compute_condition: bool = True):
        if alpha < 0:
            raise ParameterError("alpha must be non-negative")
        self.alpha = float(alpha)
        self.n = L.shape[0]
        self._L = L
        self.direct = self.n <= DIRECT_SOLVE_LIMIT
        if self.n:
            _, labels = connected_components(sp.csr_array(L), directed=False)
            ind = sp.csr_array((np.ones(self.n), (np.arange(self.n), labels)))
            self._ind = ind
            self._counts = np.asarray(ind.sum(axis=0)).ravel()
            self._labels = labels
        if self.direct:
            Ld = L.toarray() if sp.issparse(L) else np.asarray(L, dtype=float)
            A = np.eye(self.n) + self.alpha * Ld
            self._chol = scipy.linalg.cho_factor(A, lower=True) if self.n else None
        else:
            self._A = (sp.identity(self.n, format="csr") + self.alpha * sp.csr_array(L)).tocsr()
            diag = self._A.diagonal()
            self._precond = sp.diags_array(1.0 / diag)
        self.condition = 1.0 + self.alpha * lambda_max(L) if compute_condition and self.n else None

    def _component_mean(self, y: np.ndarray) -> np.ndarray:
        means = self._ind.T @ y
        means = means / (self._counts[:, None] if y.ndim == 2 else self._counts)
        return self._ind @ means

    def apply(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if self.alpha == 0 or self.n == 0:
            return y.copy()
        fixed = self._component_mean(y)
        return fixed + self._solve(y - fixed)

    def _solve(self, w: np.ndarray) -> np.ndarray:
        if self.direct:
            return scipy.linalg.cho_solve(self._chol, w)
        if w.ndim == 2:
            return np.column_stack([self._solve(col) for col in w.T])
        if not np.any(w):
            return w.copy()
        s, info = cg(self._A, w, rtol=CG_RTOL, atol=0.0, M=self._precond, maxiter=10 * self.n)
        if info != 0:
            raise NumericalError(f"conjugate gradient did not converge (info={info})")
        return s

    def diagonal_entry(self, i: int) -> float:
        """``e_i^T M e_i``."""
        if self.alpha == 0:
            return 1.0
        e = np.zeros(self.n)
        e[i] = 1.0
        size = self._counts[self._labels[i]]
        e -= (self._labels == self._labels[i]) / size
        return float(1.0 / size + self._solve(e)[i])


def smoothing_apply(L_H, alpha: float, y) -> np.ndarray:
    """Graph smoothing ``argmin_s ||s - y||^2 + alpha s^T L_H s`` = ``M y``."""
    return SmoothingOperator(L_H, alpha, compute_condition=False).apply(y)


def _check_sigmas(sigma_x, sigma_delta) -> None:
    if np.ndim(sigma_x) != 0:
        raise ParameterError("closed form needs a single prior sigma_x; use the oracle for per-user priors")
    if not sigma_x > 0:
        raise ParameterError("sigma_x must be positive")
    if sigma_delta < 0:
        raise ParameterError("sigma_delta must be non-negative")


def _honest_index(g: NetworkGraph, u: int) -> int:
    if not 0 <= u < g.n:
        raise ParameterError(f"user {u} out of range")
    if g.malicious[u]:
        raise DomainError(f"user {u} is malicious; privacy is defined for honest users only")
    return int(np.searchsorted(g.honest_users, u))


def preserved_variance(g: NetworkGraph, u: int, sigma_x: float, sigma_delta: float) -> float:
    """Preserved variance ratio ``var(X_u | I) / var(X_u)`` of honest user ``u``."""
    _check_sigmas(sigma_x, sigma_delta)
    i = _honest_index(g, u)
    if sigma_delta == 0:
        return 0.0
    gh = honest_subgraph(g)
    op = SmoothingOperator(laplacian(gh), sigma_delta ** 2 / sigma_x ** 2, compute_condition=False)
    return max(0.0, 1.0 - op.diagonal_entry(i))


def variance_lower_bound(num_honest_neighbors: int, sigma_x: float, sigma_delta: float) -> float:
    """Posterior-variance lower bound from the honest degree alone.

    Exact when ``u`` is the only honest user exchanging noise with its
    honest neighbours (a star). Divide by ``sigma_x**2`` for a ratio.
    """
    h = num_honest_neighbors
    if h < 0:
        raise ParameterError("neighbour count must be non-negative")
    sx2, sd2 = sigma_x ** 2, sigma_delta ** 2
    if sd2 == 0 or h == 0:
        return 0.0
    return sx2 * (sd2 * (h + 1) / (sx2 + sd2 * (h + 1))) * (h / (h + 1))


def incidence_matrix(g: NetworkGraph) -> np.ndarray:
    """Oriented incidence matrix: column ``e=(u,v)``, ``u<v``, has +1 at ``u`` and -1 at ``v``."""
    B = np.zeros((g.n, g.num_edges))
    for e, (u, v) in enumerate(g.edges.tolist()):
        B[u, e] = 1.0
        B[v, e] = -1.0
    return B


def posterior_covariance(g: NetworkGraph, sigma_x, sigma_delta: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gaussian conditioning of honest values and honest-honest noise on the adversary's view.

    The unknowns are ``V = (X_H, delta_H)``. The adversary observes
    ``A V = X_H + B_H delta_H`` with ``A = [I | B_H]``.

    Returns:
        ``(A, Sigma, post)`` where ``post = Sigma - Sigma A^T (A Sigma A^T)^{-1} A Sigma``.
    """
    gh = honest_subgraph(g)
    h, m = gh.n, gh.num_edges
    sx = np.broadcast_to(np.asarray(sigma_x, dtype=float), (h,)) if np.ndim(sigma_x) else np.full(h, float(sigma_x))
    if np.any(sx <= 0):
        raise ParameterError("prior standard deviations must be positive")
    A = np.hstack([np.eye(h), incidence_matrix(gh)])
    Sigma = np.diag(np.concatenate([sx ** 2, np.full(m, float(sigma_delta) ** 2)]))
    S = A @ Sigma @ A.T
    try:
        K = np.linalg.solve(S, A @ Sigma)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("observation covariance is singular") from exc
    post = Sigma - Sigma @ A.T @ K
    return A, Sigma, post


def conditional_variance_oracle(g: NetworkGraph, u: int, sigma_x, sigma_delta: float) -> float:
    """Posterior variance of ``X_u`` by Schur complement (an independent check).

    ``sigma_x`` may be a per-honest-user array for non-uniform priors.
    """
    i = _honest_index(g, u)
    _, _, post = posterior_covariance(g, sigma_x, sigma_delta)
    return max(0.0, float(post[i, i]))


def compose_privacy(rho_sequence: Iterable[float]) -> float:
    """Preserved ratio after several runs on the same private value."""
    total = 1.0
    for r in rho_sequence:
        if not 0.0 <= r <= 1.0:
            raise ParameterError(f"ratio {r} outside [0, 1]")
        total *= r
    return total


def recursive_ratios(g: NetworkGraph, u: int, sigma_x: float, sigma_delta: float, runs: int) -> list:
    """Per-run ratios with the prior replaced by the previous posterior.

    Each run recomputes the closed form with ``sigma_x^2`` set to the
    current posterior variance of ``u``; feed the result to
    :func:`compose_privacy`.
    """
    ratios, var = [], float(sigma_x) ** 2
    for _ in range(runs):
        if var <= 0:
            ratios.append(0.0)
            continue
        r = preserved_variance(g, u, math.sqrt(var), sigma_delta)
        ratios.append(r)
        var *= r
    return ratios


@dataclass
class PrivacyReport:
    """Per-user privacy of a run.

    ``rho`` maps honest user id to its preserved variance ratio; ``epsilon``
    is ``1 - rho``. ``condition`` is the condition number of ``I + alpha L_H``.
    """

    sigma_x: float
    sigma_delta: float
    rho: Dict[int, float]
    honest_neighbors: Dict[int, int]
    local_bound: Dict[int, float]
    condition: Optional[float] = None

    @property
    def alpha(self) -> float:
        return self.sigma_delta ** 2 / self.sigma_x ** 2

    @property
    def epsilon(self) -> Dict[int, float]:
        return {u: 1.0 - r for u, r in self.rho.items()}

    def summary(self) -> dict:
        r = np.array(list(self.rho.values())) if self.rho else np.zeros(0)
        eps = 1.0 - r
        stats = lambda a: {"min": float(a.min()), "mean": float(a.mean()), "max": float(a.max())} if a.size else {}
        return {"sigma_x": self.sigma_x, "sigma_delta": self.sigma_delta, "alpha": self.alpha,
                "users": len(r), "rho": stats(r), "epsilon": stats(eps), "condition": self.condition}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["user", "honest_neighbors", "rho", "epsilon", "local_bound"])
        for u in sorted(self.rho):
            w.writerow([u, self.honest_neighbors[u], repr(self.rho[u]), repr(1.0 - self.rho[u]),
                        repr(self.local_bound[u])])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)


def privacy_report(g: NetworkGraph, sigma_x: float, sigma_delta: float,
                   users: Optional[Sequence[int]] = None, compute_condition: bool = True) -> PrivacyReport:
    """Privacy of every honest user (or of ``users``) with one factorisation."""
    _check_sigmas(sigma_x, sigma_delta)
    honest = g.honest_users
    if users is None:
        users = honest.tolist()
    users = [int(u) for u in users]
    for u in users:
        _honest_index(g, u)
    gh = honest_subgraph(g)
    alpha = sigma_delta ** 2 / sigma_x ** 2
    op = SmoothingOperator(laplacian(gh), alpha, compute_condition=compute_condition)
    hn = g.honest_neighbor_counts()
    rho, nbrs, bound = {}, {}, {}
    sx2 = sigma_x ** 2
    for u in users:
        i = int(np.searchsorted(honest, u))
        rho[u] = 0.0 if alpha == 0 else max(0.0, 1.0 - op.diagonal_entry(i))
        nbrs[u] = int(round(hn[u]))
        bound[u] = variance_lower_bound(nbrs[u], sigma_x, sigma_delta) / sx2
    return PrivacyReport(float(sigma_x), float(sigma_delta), rho, nbrs, bound, op.condition)


def expected_error_ratio(report: PrivacyReport, u: int) -> float:
    """Adversary's squared prediction error after / before observing the run.

    For the best (posterior-mean) predictor this equals ``rho_u``.
    """
    if u not in report.rho:
        raise DomainError(f"user {u} not in report")
    return report.rho[u]


# --- adversary view ------------------------------------------------------

@dataclass
class AdversaryView:
    """What the colluding malicious users know after the randomization phase.

    ``incident_noise`` holds ``delta_{u,v}`` for every recorded pair with at
    least one malicious endpoint, keyed ``(u, v)`` with ``u < v``.
    """

    graph: NetworkGraph
    noisy: np.ndarray
    incident_noise: Dict[Tuple[int, int], float] = field(default_factory=dict)
    malicious_values: Dict[int, float] = field(default_factory=dict)

    @classmethod
    def from_run(cls, g: NetworkGraph, x, state, ledger) -> "AdversaryView":
        """Extract the view from a simulated run (real units)."""
        mal = g.malicious
        noise = {}
        for (u, v), d in ledger.items():
            if mal[u] or mal[v]:
                noise[(u, v)] = ledger.as_real(d)
        values = {int(u): float(x.values[u]) for u in np.flatnonzero(mal)}
        return cls(g, state.real_values().copy(), noise, values)

    def incident(self, u: int, v: int) -> float:
        if u < v:
            return self.incident_noise[(u, v)]
        return -self.incident_noise[(v, u)]

    def honest_residuals(self) -> np.ndarray:
        """``X_u^H = X~_u - sum`` of noise ``u`` exchanged with malicious users, for honest ``u``."""
        g = self.graph
        res = []
        for u in g.honest_users.tolist():
            s = self.noisy[u]
            for v in g.neighbors(u).tolist():
                if g.malicious[v]:
                    s -= self.incident(u, v)
            res.append(s)
        return np.array(res)


def posterior_mean_attack(view: AdversaryView, sigma_x, sigma_delta: float) -> np.ndarray:
    """Posterior mean of the honest private values given the view (Gaussian priors)."""
    A, Sigma, _ = posterior_covariance(view.graph, sigma_x, sigma_delta)
    b = view.honest_residuals()
    h = len(b)
    gain = Sigma @ A.T @ np.linalg.solve(A @ Sigma @ A.T, b)
    return gain[:h]
