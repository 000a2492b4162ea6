"""Embedding similarity q_ij = 1 / (1 + a * ||z_i - z_j||^(2b)) and the fuzzy
cross-entropy between the data graph P and the embedding graph Q."""

import functools
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import OptimizeWarning, curve_fit
from scipy.special import xlogy

import autodiff as ad
from autodiff import ShapeError, Tensor

EPSILON = 1e-4
MAX_FULL_N = 2000
SQ_DIST_FLOOR = 1e-24
FIT_GRID_POINTS = 300


@dataclass(frozen=True)
class KernelParams:
    a: float
    b: float
    min_dist: Optional[float] = None
    spread: float = 1.0

    def __post_init__(self):
        if not (self.a > 0.0 and self.b > 0.0):
            raise ValueError(f"kernel parameters must be positive, got a={self.a}, b={self.b}")

    def curve(self, d):
        return 1.0 / (1.0 + self.a * np.power(np.asarray(d, dtype=np.float64), 2.0 * self.b))


def target_curve(d, min_dist: float, spread: float = 1.0) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    return np.where(d <= min_dist, 1.0, np.exp(-(d - min_dist) / spread))


@functools.lru_cache(maxsize=32)
def fit_ab(min_dist: float = 0.1, spread: float = 1.0) -> KernelParams:
    """Least-squares (a, b) so the kernel tracks the offset exponential on [0, 3 * spread]."""
    if min_dist < 0.0:
        raise ValueError(f"min_dist must be >= 0, got {min_dist}")
    if spread <= 0.0:
        raise ValueError(f"spread must be > 0, got {spread}")

    def curve(x, a, b):
        return 1.0 / (1.0 + a * x ** (2 * b))

    xv = np.linspace(0.0, 3.0 * spread, FIT_GRID_POINTS)
    yv = target_curve(xv, min_dist, spread)
    with warnings.catch_warnings(), np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        warnings.simplefilter("ignore", OptimizeWarning)
        params, _ = curve_fit(curve, xv, yv, p0=(1.0, 1.0), maxfev=10000)
    return KernelParams(a=float(params[0]), b=float(params[1]), min_dist=float(min_dist), spread=float(spread))


def kernel_params(a: Optional[float] = None, b: Optional[float] = None, min_dist: float = 0.1,
                  spread: float = 1.0) -> KernelParams:
    """Explicit (a, b) win over the min_dist fit."""
    if a is not None and b is not None:
        return KernelParams(a=float(a), b=float(b))
    if (a is None) != (b is None):
        raise ValueError("kernel parameters a and b must be given together")
    return fit_ab(float(min_dist), float(spread))


def q_similarity(z_i, z_j, kp: KernelParams) -> Tensor:
    """Row-wise q for (E, d) embedding pairs, or a scalar for two vectors."""
    z_i, z_j = ad.as_tensor(z_i), ad.as_tensor(z_j)
    if z_i.shape != z_j.shape:
        raise ShapeError(f"q_similarity: embedding shapes differ, {z_i.shape} and {z_j.shape}")
    diff = z_i - z_j
    sq = diff * diff
    sq_dist = sq.sum() if diff.ndim == 1 else sq.sum(axis=1)
    # below the floor the distance carries no gradient, which keeps d/dz finite at z_i == z_j
    powered = sq_dist.clamp(SQ_DIST_FLOOR, np.inf).power(kp.b)
    return 1.0 / (1.0 + powered * kp.a)


def _attraction(p: np.ndarray, q: Tensor) -> Tensor:
    return (Tensor(p) * q.log()).sum()


def _repulsion(p: np.ndarray, q: Tensor) -> Tensor:
    return (Tensor(1.0 - p) * (1.0 - q).log()).sum()


def cross_entropy_from_q(p: np.ndarray, q) -> Tensor:
    """sum p log(p/q) + (1-p) log((1-p)/(1-q)) with q clamped to [eps, 1-eps], 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = ad.as_tensor(q).clamp(EPSILON, 1.0 - EPSILON)
    const = float(np.sum(xlogy(p, p) + xlogy(1.0 - p, 1.0 - p)))
    return const - (_attraction(p, q) + _repulsion(p, q))


def cross_entropy_full(graph, Z, kp: KernelParams) -> Tensor:
    """Every unordered pair once; quadratic, meant for small N."""
    Z = ad.as_tensor(Z)
    n = Z.shape[0]
    if n > MAX_FULL_N:
        raise ValueError(f"cross_entropy_full: N={n} exceeds {MAX_FULL_N}, use the batched loss")
    if graph.n != n:
        raise ShapeError(f"cross_entropy_full: graph has {graph.n} points, embeddings have {n}")
    iu, ju = np.triu_indices(n, k=1)
    p = graph.lookup(iu, ju)
    return cross_entropy_from_q(p, q_similarity(Z.take(iu), Z.take(ju), kp))


def cross_entropy_batch(graph, batch, Z_batch, kp: KernelParams) -> Tensor:
    """(1/|E_b|) [sum_pos log(p/q) + sum_neg log((1-p)/(1-q))].

    ``Z_batch`` holds one embedding row per entry of ``batch.vertices``.
    """
    Z_batch = ad.as_tensor(Z_batch)
    n_pos, n_neg = len(batch.positives), len(batch.negatives)
    if n_pos + n_neg == 0:
        raise ValueError("cross_entropy_batch: empty batch")
    if Z_batch.shape[0] != len(batch.vertices):
        raise ShapeError(
            f"cross_entropy_batch: {Z_batch.shape[0]} embedding rows for {len(batch.vertices)} batch vertices"
        )

    pos_local, neg_local = batch.local_positives, batch.local_negatives
    total = Tensor(0.0)
    if n_pos:
        p_pos = graph.lookup(batch.positives[:, 0], batch.positives[:, 1])
        q_pos = q_similarity(Z_batch.take(pos_local[:, 0]), Z_batch.take(pos_local[:, 1]), kp)
        q_pos = q_pos.clamp(EPSILON, 1.0 - EPSILON)
        total = total + (float(np.log(p_pos).sum()) - q_pos.log().sum())
    if n_neg:
        p_neg = graph.lookup(batch.negatives[:, 0], batch.negatives[:, 1])
        q_neg = q_similarity(Z_batch.take(neg_local[:, 0]), Z_batch.take(neg_local[:, 1]), kp)
        q_neg = q_neg.clamp(EPSILON, 1.0 - EPSILON)
        # a sampled negative can land on a p = 1 edge; keep its constant finite
        const = float(np.log(np.maximum(1.0 - p_neg, EPSILON)).sum())
        total = total + (const - (1.0 - q_neg).log().sum())
    return total * (1.0 / (n_pos + n_neg))
