"""Input Mixup, Manifold Mixup and UMAP Mixup forward passes plus the mixed loss.

Manifold and UMAP Mixup share one forward computation: both embed the two
inputs with h, interpolate the embeddings and run the head g on the result.
They differ only in how the trainer picks pairs and whether it adds the
UMAP regularizer.
"""

from dataclasses import dataclass

import numpy as np

import autodiff as ad
from autodiff import ShapeError, Tensor

LOSSES = ("squared_error",)


@dataclass(frozen=True)
class MixedPair:
    """One batch of mixing pairs: rows ``i`` and ``j``, a ratio per pair and the mixed targets."""

    i: np.ndarray
    j: np.ndarray
    lam: np.ndarray
    target: np.ndarray

    @classmethod
    def make(cls, i, j, lam, y_i, y_j) -> "MixedPair":
        i = np.atleast_1d(np.asarray(i, dtype=np.int64))
        j = np.atleast_1d(np.asarray(j, dtype=np.int64))
        if i.shape != j.shape or i.ndim != 1:
            raise ShapeError(f"mixed pair: index shapes differ, {i.shape} and {j.shape}")
        rows = i.shape[0]
        y_i = np.asarray(y_i, dtype=np.float64).reshape(rows, -1)
        y_j = np.asarray(y_j, dtype=np.float64).reshape(rows, -1)
        if y_i.shape != y_j.shape:
            raise ShapeError(f"mixed pair: label shapes differ, {y_i.shape} and {y_j.shape}")
        w = _lambda_column(lam, rows)
        lam_rows = np.broadcast_to(np.asarray(w, dtype=np.float64).reshape(-1), (rows,)).copy()
        return cls(i=i, j=j, lam=lam_rows, target=w * y_i + (1.0 - w) * y_j)

    def __len__(self) -> int:
        return int(self.i.shape[0])

    def loss(self, pred: Tensor, loss: str = "squared_error") -> Tensor:
        return _target_loss(pred, self.target, loss)


def _lambda_column(lam, rows: int):
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0.0) or np.any(lam > 1.0):
        raise ValueError("mixing ratio must lie in [0, 1]")
    if lam.ndim == 0:
        return float(lam)
    if lam.shape[0] != rows:
        raise ShapeError(f"mix: {lam.shape[0]} mixing ratios for {rows} rows")
    return lam.reshape(-1, 1)


def mix_inputs(x_i, y_i, x_j, y_j, lam):
    """Convex combinations of features and labels; ``lam`` may hold one ratio per row."""
    x_i, x_j = np.asarray(x_i, dtype=np.float64), np.asarray(x_j, dtype=np.float64)
    y_i, y_j = np.asarray(y_i, dtype=np.float64), np.asarray(y_j, dtype=np.float64)
    if x_i.shape != x_j.shape:
        raise ShapeError(f"mix_inputs: feature shapes differ, {x_i.shape} and {x_j.shape}")
    if y_i.shape != y_j.shape:
        raise ShapeError(f"mix_inputs: label shapes differ, {y_i.shape} and {y_j.shape}")
    rows = x_i.shape[0] if x_i.ndim == 2 else 1
    w = _lambda_column(lam, rows)
    if not np.isscalar(w) and x_i.ndim < 2:
        raise ShapeError("mix_inputs: per-row mixing ratios need 2-D inputs")
    return w * x_i + (1.0 - w) * x_j, w * y_i + (1.0 - w) * y_j


def mix_tensors(a: Tensor, b: Tensor, lam) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mix: shapes differ, {a.shape} and {b.shape}")
    w = _lambda_column(lam, a.shape[0] if a.ndim == 2 else 1)
    return a * w + b * (1.0 - w)


def mix_embedded(model, z: Tensor, z_prime: Tensor, lam) -> Tensor:
    """Head applied to interpolated embeddings (steps 3-5 of the UMAP Mixup pass)."""
    return model.head(mix_tensors(z, z_prime, lam))


def umap_mixup_forward(model, x, x_prime, lam) -> Tensor:
    return mix_embedded(model, model.embed(x), model.embed(x_prime), lam)


def manifold_mixup_forward(model, x, x_prime, lam) -> Tensor:
    return umap_mixup_forward(model, x, x_prime, lam)


def input_mixup_forward(model, x, x_prime, lam) -> Tensor:
    x = x.numpy() if isinstance(x, Tensor) else x
    x_prime = x_prime.numpy() if isinstance(x_prime, Tensor) else x_prime
    x_i, x_j = np.asarray(x, dtype=np.float64), np.asarray(x_prime, dtype=np.float64)
    if x_i.shape != x_j.shape:
        raise ShapeError(f"input_mixup_forward: feature shapes differ, {x_i.shape} and {x_j.shape}")
    w = _lambda_column(lam, x_i.shape[0])
    return model.predict(w * x_i + (1.0 - w) * x_j)


def mixed_loss(pred: Tensor, y, y_prime, lam, loss: str = "squared_error") -> Tensor:
    """Loss of ``pred`` against lam * y + (1 - lam) * y', averaged over rows."""
    pred = ad.as_tensor(pred)
    y = np.asarray(y, dtype=np.float64).reshape(pred.shape)
    y_prime = np.asarray(y_prime, dtype=np.float64).reshape(pred.shape)
    rows = pred.shape[0] if pred.ndim == 2 else 1
    w = _lambda_column(lam, rows)
    return _target_loss(pred, w * y + (1.0 - w) * y_prime, loss)


def _target_loss(pred, target, loss: str) -> Tensor:
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}, expected one of {LOSSES}")
    pred = ad.as_tensor(pred)
    residual = pred - np.asarray(target, dtype=np.float64).reshape(pred.shape)
    sq = residual * residual
    if sq.ndim == 2:
        return sq.sum(axis=1).mean()
    return sq.sum()
