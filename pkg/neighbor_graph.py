"""Fuzzy data graph P over training features.

Exact k-NN, per-point local scales (rho, sigma), directional memberships
exp(-max(0, d - rho) / sigma) and their fuzzy union a + b - ab.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse
from scipy.spatial.distance import cdist

log = logging.getLogger(__name__)

METRICS = {
    "euclidean": "euclidean",
    "manhattan": "cityblock",
    "chebyshev": "chebyshev",
}
DEFAULT_K = 15
BISECTION_ITERS = 64
SMOOTH_K_TOLERANCE = 1e-5
MIN_K_DIST_SCALE = 1e-3
MAX_SIGMA = 1e3
MIN_SIGMA = 1e-12
GRAPH_FILE_TAG = "# umap-mixup graph v1"


@dataclass(frozen=True)
class NeighborTable:
    indices: np.ndarray
    distances: np.ndarray

    @property
    def n_points(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]


@dataclass(frozen=True)
class LocalScale:
    rho: float
    sigma: float


@dataclass(frozen=True)
class DirectionalTable:
    """p_{j|i} for the K neighbors of every point i."""

    indices: np.ndarray
    probabilities: np.ndarray
    metric: str = "euclidean"


@dataclass(frozen=True)
class DataGraph:
    n: int
    k: int
    metric: str
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    rho: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None
    source_checksum: str = ""
    _matrix: scipy.sparse.csr_matrix = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        upper = scipy.sparse.coo_matrix((self.weights, (self.rows, self.cols)), shape=(self.n, self.n))
        object.__setattr__(self, "_matrix", (upper + upper.T).tocsr())

    @property
    def n_edges(self) -> int:
        return int(self.weights.shape[0])

    @property
    def mean_weight(self) -> float:
        return float(self.weights.mean()) if self.n_edges else 0.0

    @property
    def edges(self) -> List[Tuple[int, int, float]]:
        return [(int(i), int(j), float(p)) for i, j, p in zip(self.rows, self.cols, self.weights)]

    def local_scale(self, i: int) -> LocalScale:
        if self.rho is None:
            raise ValueError("graph carries no local scales (imported from file)")
        return LocalScale(float(self.rho[i]), float(self.sigma[i]))

    def lookup(self, i, j) -> np.ndarray:
        """p_ij for index arrays i, j; zero where no edge exists."""
        i = np.atleast_1d(np.asarray(i, dtype=np.int64))
        j = np.atleast_1d(np.asarray(j, dtype=np.int64))
        return np.asarray(self._matrix[i, j], dtype=np.float64).ravel()

    def to_dense(self) -> np.ndarray:
        return self._matrix.toarray()


def feature_checksum(features: np.ndarray) -> str:
    arr = np.ascontiguousarray(np.asarray(features, dtype="<f8"))
    digest = hashlib.sha256(str(arr.shape).encode("ascii"))
    digest.update(arr.tobytes())
    return digest.hexdigest()


def knn(features: np.ndarray, k: int, metric: str = "euclidean") -> NeighborTable:
    """Exact brute-force neighbors, ascending, ties broken by lower index."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"knn: expected a 2-D feature matrix, got shape {X.shape}")
    n = X.shape[0]
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if k >= n:
        raise ValueError(f"K must be < N (K={k}, N={n})")
    if not np.all(np.isfinite(X)):
        raise ValueError("knn: non-finite feature value")
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}, expected one of {sorted(METRICS)}")

    dist = cdist(X, X, metric=METRICS[metric])
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return NeighborTable(indices=order, distances=np.take_along_axis(dist, order, axis=1))


def fit_local_scale(distances: np.ndarray, k: int) -> LocalScale:
    """rho is the nearest distance; sigma makes the memberships sum to log2(K)."""
    d = np.asarray(distances, dtype=np.float64)
    rho = float(d[0])
    target = math.log2(k)
    shifted = np.maximum(0.0, d - rho)
    lower = max(MIN_K_DIST_SCALE * float(d.mean()), MIN_SIGMA)

    # as sigma -> 0 the sum falls to the number of neighbors at distance rho
    if np.count_nonzero(shifted == 0.0) >= target:
        return LocalScale(rho=rho, sigma=float(min(lower, MAX_SIGMA)))

    lo, hi, mid = 0.0, np.inf, 1.0
    for _ in range(BISECTION_ITERS):
        psum = float(np.exp(-shifted / mid).sum())
        if abs(psum - target) < SMOOTH_K_TOLERANCE:
            break
        if psum > target:
            hi = mid
            mid = (lo + hi) / 2.0
        else:
            lo = mid
            mid = mid * 2.0 if hi == np.inf else (lo + hi) / 2.0

    return LocalScale(rho=rho, sigma=float(min(max(mid, lower), MAX_SIGMA)))


def directional_probability(d_ij, rho_i, sigma_i):
    return np.exp(-np.maximum(0.0, np.asarray(d_ij, dtype=np.float64) - rho_i) / sigma_i)


def fuzzy_union(a, b):
    # a + b - ab, arranged so a certain membership stays exactly 1
    hi = np.maximum(a, b)
    lo = np.minimum(a, b)
    return hi + lo * (1.0 - hi)


def directional_table(neighbors: NeighborTable, scales: List[LocalScale], metric: str = "euclidean") -> DirectionalTable:
    rho = np.array([s.rho for s in scales])[:, None]
    sigma = np.array([s.sigma for s in scales])[:, None]
    return DirectionalTable(neighbors.indices, directional_probability(neighbors.distances, rho, sigma), metric)


def symmetrize(table: DirectionalTable, rho=None, sigma=None, source_checksum: str = "") -> DataGraph:
    n, k = table.indices.shape
    rows = np.repeat(np.arange(n), k)
    directed = scipy.sparse.coo_matrix(
        (table.probabilities.ravel(), (rows, table.indices.ravel())), shape=(n, n)
    ).tocsr()
    pattern = scipy.sparse.triu(directed + directed.T, k=1).tocoo()
    r, c = pattern.row.astype(np.int64), pattern.col.astype(np.int64)
    weights = fuzzy_union(np.asarray(directed[r, c]).ravel(), np.asarray(directed[c, r]).ravel())
    keep = weights > 0.0
    order = np.lexsort((c[keep], r[keep]))
    return DataGraph(
        n=n,
        k=k,
        metric=table.metric,
        rows=r[keep][order],
        cols=c[keep][order],
        weights=weights[keep][order],
        rho=rho,
        sigma=sigma,
        source_checksum=source_checksum,
    )


def build_graph(features: np.ndarray, k: int = DEFAULT_K, metric: str = "euclidean") -> DataGraph:
    if k < 2:
        raise ValueError(f"K must be >= 2 to build a graph, got {k}")
    neighbors = knn(features, k, metric)
    scales = [fit_local_scale(neighbors.distances[i], k) for i in range(neighbors.n_points)]
    graph = symmetrize(
        directional_table(neighbors, scales, metric),
        rho=np.array([s.rho for s in scales]),
        sigma=np.array([s.sigma for s in scales]),
        source_checksum=feature_checksum(features),
    )
    log.info("graph: N=%d K=%d edges=%d mean p=%.4f", graph.n, k, graph.n_edges, graph.mean_weight)
    return graph


def export_graph(graph: DataGraph, path) -> None:
    lines = [GRAPH_FILE_TAG, f"# N={graph.n} K={graph.k} metric={graph.metric}"]
    lines.extend(f"{i} {j} {p!r}" for i, j, p in graph.edges)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def import_graph(path) -> DataGraph:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if len(lines) < 2 or lines[0] != GRAPH_FILE_TAG:
        raise ValueError(f"{path}: not a graph file")
    try:
        fields = dict(item.split("=", 1) for item in lines[1].lstrip("# ").split())
        n, k, metric = int(fields["N"]), int(fields["K"]), fields["metric"]
    except (KeyError, ValueError):
        raise ValueError(f"{path}: malformed graph header {lines[1]!r}") from None

    rows, cols, weights = [], [], []
    for line_no, line in enumerate(lines[2:], start=3):
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}: line {line_no} is not 'i j p_ij'")
        i, j, p = int(parts[0]), int(parts[1]), float(parts[2])
        if not (0 <= i < j < n) or not 0.0 < p <= 1.0:
            raise ValueError(f"{path}: line {line_no} has an invalid edge {line!r}")
        rows.append(i)
        cols.append(j)
        weights.append(p)
    return DataGraph(
        n=n, k=k, metric=metric,
        rows=np.array(rows, dtype=np.int64), cols=np.array(cols, dtype=np.int64),
        weights=np.array(weights, dtype=np.float64),
    )
