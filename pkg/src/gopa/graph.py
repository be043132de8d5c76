"""Communication topology: random k-out construction, roles and spectra.

Graphs are immutable. Nodes are the integers ``0 .. n-1``; ``labels`` maps
each node back to its id in the graph it was extracted from, so induced
subgraphs can be related to the original population.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from os import PathLike
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import eigsh

from .errors import NumericalError, ParameterError

# Below this many nodes the Laplacian is materialised as a dense array.
DENSE_NODE_LIMIT = 500
# Largest size for which lambda2 uses the dense symmetric eigensolver.
DENSE_EIG_LIMIT = 2000
EIG_TOL = 1e-8

LaplacianMatrix = Union[np.ndarray, sp.csr_array]


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class NetworkGraph:
    """Undirected simple graph with honest/malicious roles.

    Args:
        n: number of users.
        edges: ``(m, 2)`` integer array of unordered pairs, stored with
            ``u < v`` and sorted lexicographically.
        malicious: boolean mask of length ``n``.
        labels: original user ids of the nodes.
        k: selections per user when built by :func:`generate_k_out`.
        seed: seed used by the generator, if any.
    """

    n: int
    edges: np.ndarray
    malicious: np.ndarray
    labels: np.ndarray
    k: Optional[int] = None
    seed: Optional[int] = None
    _adj: sp.csr_array = field(init=False, repr=False)
    _neighbors: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if self.n < 1:
            raise ParameterError(f"graph needs at least one node, got n={self.n}")
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= self.n):
            raise ParameterError("edge endpoint out of range")
        if np.any(e[:, 0] == e[:, 1]):
            raise ParameterError("self-loops are not allowed")
        e = np.sort(e, axis=1)
        e = np.unique(e, axis=0) if len(e) else e
        mal = np.zeros(self.n, dtype=bool) if self.malicious is None else np.asarray(self.malicious, dtype=bool)
        if mal.shape != (self.n,):
            raise ParameterError("role mask must have length n")
        labels = np.arange(self.n) if self.labels is None else np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "edges", _frozen(e))
        object.__setattr__(self, "malicious", _frozen(mal.copy()))
        object.__setattr__(self, "labels", _frozen(labels.copy()))

        m = len(e)
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        adj = sp.csr_array((np.ones(2 * m), (rows, cols)), shape=(self.n, self.n))
        object.__setattr__(self, "_adj", adj)
        nbrs = tuple(
            _frozen(adj.indices[adj.indptr[u]:adj.indptr[u + 1]].astype(np.int64))
            for u in range(self.n)
        )
        object.__setattr__(self, "_neighbors", nbrs)

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[Sequence[int]], malicious=None, **kw) -> "NetworkGraph":
        return cls(n=n, edges=np.array(list(edges), dtype=np.int64).reshape(-1, 2),
                   malicious=malicious, labels=None, **kw)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self._adj.indptr)

    @property
    def honest(self) -> np.ndarray:
        return ~self.malicious

    @property
    def honest_users(self) -> np.ndarray:
        return np.flatnonzero(~self.malicious)

    @property
    def malicious_fraction(self) -> float:
        return 1.0 - len(self.honest_users) / self.n

    def neighbors(self, u: int) -> np.ndarray:
        """Sorted neighbour ids of ``u``."""
        return self._neighbors[u]

    def has_edge(self, u: int, v: int) -> bool:
        if u == v:
            return False
        nb = self._neighbors[u]
        i = np.searchsorted(nb, v)
        return bool(i < len(nb) and nb[i] == v)

    def adjacency(self, dense: Optional[bool] = None) -> LaplacianMatrix:
        if dense is None:
            dense = self.n < DENSE_NODE_LIMIT
        return self._adj.toarray() if dense else self._adj.copy()

    def honest_neighbor_counts(self) -> np.ndarray:
        """Number of honest neighbours of every node."""
        return self._adj @ (~self.malicious).astype(float)

    def with_roles(self, malicious) -> "NetworkGraph":
        return NetworkGraph(self.n, self.edges, malicious, self.labels, self.k, self.seed)

    def without_edges(self, pairs: Iterable[Sequence[int]]) -> "NetworkGraph":
        """Copy of the graph with the given unordered pairs removed."""
        drop = {(min(u, v), max(u, v)) for u, v in pairs}
        if not drop:
            return self
        keep = [i for i, (u, v) in enumerate(self.edges.tolist()) if (u, v) not in drop]
        return NetworkGraph(self.n, self.edges[keep], self.malicious, self.labels, self.k, self.seed)

    def induced_subgraph(self, nodes: Iterable[int]) -> "NetworkGraph":
        """Subgraph on ``nodes`` relabelled to ``0 .. len(nodes)-1``."""
        nodes = np.unique(np.asarray(list(nodes), dtype=np.int64))
        index = np.full(self.n, -1, dtype=np.int64)
        index[nodes] = np.arange(len(nodes))
        e = index[self.edges] if len(self.edges) else self.edges
        e = e[(e >= 0).all(axis=1)] if len(e) else e
        return NetworkGraph(len(nodes), e, self.malicious[nodes], self.labels[nodes], self.k, self.seed)

    def components(self) -> np.ndarray:
        """Connected-component label of every node."""
        _, lab = connected_components(self._adj, directed=False)
        return lab


def _check_seed(rng_seed) -> np.random.Generator:
    return np.random.default_rng(rng_seed)


def generate_k_out(n: int, k: int, rng_seed: Optional[int] = None) -> NetworkGraph:
    """Random k-out graph: every user selects ``k`` distinct other users.

    The edge ``(u, v)`` exists when ``u`` selected ``v`` or ``v`` selected
    ``u``. Selection is uniform over all other users regardless of role.
    """
    if n < 3:
        raise ParameterError(f"k-out graphs need n >= 3, got {n}")
    if not 1 <= k < n:
        raise ParameterError(f"k must satisfy 1 <= k < n, got k={k}, n={n}")
    rng = _check_seed(rng_seed)
    picks = np.empty((n, k), dtype=np.int64)
    for u in range(n):
        # sample from the n-1 other users, then skip over u itself
        s = rng.choice(n - 1, size=k, replace=False)
        picks[u] = s + (s >= u)
    src = np.repeat(np.arange(n), k)
    edges = np.stack([src, picks.ravel()], axis=1)
    return NetworkGraph(n, edges, None, None, k=k, seed=rng_seed)


def assign_roles(g: NetworkGraph, f: float, rng_seed: Optional[int] = None,
                 malicious: Optional[Iterable[int]] = None) -> NetworkGraph:
    """Mark ``floor(f * n)`` uniformly chosen users as malicious.

    An explicit ``malicious`` list overrides the random placement.
    """
    mask = np.zeros(g.n, dtype=bool)
    if malicious is not None:
        idx = np.asarray(list(malicious), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= g.n):
            raise ParameterError("malicious user id out of range")
        mask[idx] = True
        return g.with_roles(mask)
    if not 0 <= f < 1:
        raise ParameterError(f"malicious fraction must be in [0, 1), got {f}")
    count = math.floor(f * g.n)
    if count:
        rng = _check_seed(rng_seed)
        mask[rng.choice(g.n, size=count, replace=False)] = True
    return g.with_roles(mask)


def honest_subgraph(g: NetworkGraph) -> NetworkGraph:
    """Subgraph induced by the honest users (``g`` itself if all are honest)."""
    if not g.malicious.any():
        return g
    return g.induced_subgraph(g.honest_users)


def laplacian(g: NetworkGraph, dense: Optional[bool] = None) -> LaplacianMatrix:
    """``diag(d) - A``; dense below :data:`DENSE_NODE_LIMIT` nodes."""
    if dense is None:
        dense = g.n < DENSE_NODE_LIMIT
    adj = g.adjacency(dense=False)
    L = sp.diags_array(g.degrees.astype(float)) - adj
    L = sp.csr_array(L)
    return L.toarray() if dense else L


def lambda2(L: LaplacianMatrix) -> float:
    """Second smallest Laplacian eigenvalue (algebraic connectivity)."""
    n = L.shape[0]
    if n < 2:
        return 0.0
    if n <= DENSE_EIG_LIMIT:
        Ld = L.toarray() if sp.issparse(L) else np.asarray(L, dtype=float)
        w = scipy.linalg.eigh(Ld, eigvals_only=True, subset_by_index=[0, 1])
        return max(float(w[1]), 0.0)
    L = sp.csc_array(L, dtype=float)
    try:
        # shift below zero keeps L - sigma*I non-singular
        w = eigsh(L, k=2, sigma=-1e-2, which="LM", tol=EIG_TOL, return_eigenvectors=False)
    except Exception as exc:  # ARPACK / factorisation failures
        raise NumericalError(f"lambda2 eigensolver failed: {exc}") from exc
    w = np.sort(w)
    val = float(w[1])
    return 0.0 if val < EIG_TOL else val


def lambda_max(L: LaplacianMatrix) -> float:
    """Largest Laplacian eigenvalue."""
    n = L.shape[0]
    if n == 0:
        return 0.0
    if n <= DENSE_EIG_LIMIT:
        Ld = L.toarray() if sp.issparse(L) else np.asarray(L, dtype=float)
        return float(scipy.linalg.eigh(Ld, eigvals_only=True, subset_by_index=[n - 1, n - 1])[0])
    return float(eigsh(sp.csr_array(L, dtype=float), k=1, which="LA", tol=EIG_TOL,
                       return_eigenvectors=False)[0])


def is_connected(g: NetworkGraph) -> bool:
    """True iff ``g`` has a single connected component."""
    if g.n <= 1:
        return True
    ncomp, _ = connected_components(g.adjacency(dense=False), directed=False)
    return ncomp == 1


def quadratic_form(L: LaplacianMatrix, s: np.ndarray) -> float:
    return float(s @ (L @ s))


# --- serialisation -------------------------------------------------------

def _fmt_opt(v) -> str:
    return "-" if v is None else str(v)


def write_edgelist(g: NetworkGraph, path: Union[str, PathLike, io.TextIOBase]) -> None:
    """Write ``n k seed``, one ``u v`` line per edge, then ``u:H|M`` lines."""
    lines = [f"{g.n} {_fmt_opt(g.k)} {_fmt_opt(g.seed)}"]
    lines += [f"{u} {v}" for u, v in g.edges.tolist()]
    lines += [f"{u}:{'M' if m else 'H'}" for u, m in enumerate(g.malicious.tolist())]
    text = "\n".join(lines) + "\n"
    if isinstance(path, io.TextIOBase):
        path.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def read_edgelist(path: Union[str, PathLike, io.TextIOBase]) -> NetworkGraph:
    if isinstance(path, io.TextIOBase):
        text = path.read()
    else:
        with open(path) as fh:
            text = fh.read()
    rows = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not rows:
        raise ParameterError("empty edge-list file")
    head = rows[0].split()
    if len(head) != 3:
        raise ParameterError(f"bad header line: {rows[0]!r}")
    n = int(head[0])
    k = None if head[1] == "-" else int(head[1])
    seed = None if head[2] == "-" else int(head[2])
    edges, mal = [], np.zeros(n, dtype=bool)
    for ln in rows[1:]:
        if ":" in ln:
            u, role = ln.split(":")
            if role not in ("H", "M"):
                raise ParameterError(f"bad role line: {ln!r}")
            mal[int(u)] = role == "M"
        else:
            u, v = ln.split()
            edges.append((int(u), int(v)))
    return NetworkGraph(n, np.array(edges, dtype=np.int64).reshape(-1, 2), mal, None, k=k, seed=seed)


def degree_distribution_csv(g: NetworkGraph) -> str:
    """CSV text with columns ``degree,count``."""
    deg, cnt = np.unique(g.degrees, return_counts=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["degree", "count"])
    w.writerows(zip(deg.tolist(), cnt.tolist()))
    return buf.getvalue()
