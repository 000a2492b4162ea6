"""Per-epoch positive/negative edge sampling over a DataGraph.

Each stored edge flips one Bernoulli(p_ij) coin per epoch and, when kept,
enters E+ once with a uniformly chosen orientation (i, j). Every positive
then drags M negatives (i, j_m) with j_m uniform over all vertices; self
pairs are allowed.
"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

DEFAULT_NEGATIVES = 5


@dataclass(frozen=True)
class EdgeEpoch:
    n: int
    m: int
    positives: np.ndarray
    negatives: np.ndarray

    @property
    def n_positives(self) -> int:
        return int(self.positives.shape[0])

    def negatives_of(self, positive_ids) -> np.ndarray:
        ids = np.asarray(positive_ids, dtype=np.int64)
        rows = (ids[:, None] * self.m + np.arange(self.m)[None, :]).ravel()
        return self.negatives[rows]


@dataclass(frozen=True)
class EdgeBatch:
    positive_ids: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    vertices: np.ndarray
    local_positives: np.ndarray
    local_negatives: np.ndarray

    @classmethod
    def from_edges(cls, positives, negatives, positive_ids=None) -> "EdgeBatch":
        pos = np.asarray(positives, dtype=np.int64).reshape(-1, 2)
        neg = np.asarray(negatives, dtype=np.int64).reshape(-1, 2)
        if pos.shape[0] + neg.shape[0] == 0:
            raise ValueError("edge batch must not be empty")
        if positive_ids is None:
            positive_ids = np.arange(pos.shape[0])
        vertices = np.unique(np.concatenate([pos.ravel(), neg.ravel()]))
        return cls(
            positive_ids=np.asarray(positive_ids, dtype=np.int64),
            positives=pos,
            negatives=neg,
            vertices=vertices,
            local_positives=np.searchsorted(vertices, pos),
            local_negatives=np.searchsorted(vertices, neg),
        )

    @property
    def size(self) -> int:
        return int(self.positives.shape[0] + self.negatives.shape[0])


def sample_epoch(graph, m: int, rng: np.random.Generator) -> EdgeEpoch:
    if m < 1:
        raise ValueError(f"M must be >= 1, got {m}")
    if graph.n_edges == 0:
        raise ValueError("cannot sample edges from an empty graph")

    keep = rng.random(graph.n_edges) < graph.weights
    src, dst = graph.rows[keep], graph.cols[keep]
    flip = rng.random(src.shape[0]) < 0.5
    src, dst = np.where(flip, dst, src), np.where(flip, src, dst)
    positives = np.stack([src, dst], axis=1).astype(np.int64)

    targets = rng.integers(0, graph.n, size=(positives.shape[0], m))
    negatives = np.stack([np.repeat(src, m), targets.ravel()], axis=1).astype(np.int64)
    return EdgeEpoch(n=graph.n, m=m, positives=positives, negatives=negatives)


def batches(epoch: EdgeEpoch, batch_size: int, rng: Optional[np.random.Generator] = None) -> List[EdgeBatch]:
    """Shuffle the positives (when given an rng) and cut them into batches of
    ``batch_size`` positives; each batch carries its own negatives and the
    final short batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = epoch.n_positives
    order = rng.permutation(n) if rng is not None else np.arange(n)
    out = []
    for start in range(0, n, batch_size):
        ids = order[start:start + batch_size]
        out.append(EdgeBatch.from_edges(epoch.positives[ids], epoch.negatives_of(ids), ids))
    return out
