"""Task heads (graph, node, edge) and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Linear
from .tensor import Tensor


class MetricError(ValueError):
    pass


@dataclass
class Mlp2:
    """Two affine maps with a relu between: ``in -> in // 2 -> out``."""

    first: Linear
    second: Linear

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, out_dim: int) -> "Mlp2":
        hidden = max(in_dim // 2, 1)
        return cls(Linear.init(rng, in_dim, hidden), Linear.init(rng, hidden, out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return self.second(T.relu(self.first(x)))

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("mlp.0.W", self.first.W), ("mlp.0.b", self.first.b),
                ("mlp.1.W", self.second.W), ("mlp.1.b", self.second.b)]


def graph_head(node_feats: Tensor, segments: np.ndarray, mlp: Mlp2, num_graphs: int | None = None) -> Tensor:
    """Mean readout per graph followed by the MLP; one output row per graph."""
    segments = np.asarray(segments)
    k = int(segments.max()) + 1 if num_graphs is None else num_graphs
    if np.any(np.bincount(segments, minlength=k) == 0):
        raise MetricError("graph_head: a graph in the batch has no nodes")
    return mlp(T.mean_segments(node_feats, segments, k))


def node_head(node_feats: Tensor, mlp: Mlp2) -> Tensor:
    return mlp(node_feats)


def edge_head(node_feats: Tensor, edges: np.ndarray, mlp: Mlp2) -> Tensor:
    """Score directed edges from ``concat(h_src, h_dst)``; order matters."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    pair = T.concat_cols(T.gather_rows(node_feats, edges[:, 0]), T.gather_rows(node_feats, edges[:, 1]))
    return mlp(pair)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricValue:
    name: str
    value: float
    support: int

    def __float__(self) -> float:
        return self.value


def accuracy_weighted(pred, true, num_classes: int) -> MetricValue:
    """Balanced accuracy: mean recall over the classes present in ``true``."""
    pred, true = np.asarray(pred, dtype=np.int64), np.asarray(true, dtype=np.int64)
    if true.size == 0:
        raise MetricError("accuracy on zero samples")
    if true.max() >= num_classes or true.min() < 0:
        raise MetricError("label outside [0, num_classes)")
    counts = np.bincount(true, minlength=num_classes)
    hits = np.bincount(true[pred == true], minlength=num_classes)
    present = counts > 0
    value = float(np.mean(hits[present] / counts[present]))
    return MetricValue("accuracy_weighted", value, int(true.size))


def f1_positive(pred, true) -> MetricValue:
    pred, true = np.asarray(pred).astype(bool), np.asarray(true).astype(bool)
    tp = int(np.count_nonzero(pred & true))
    fp = int(np.count_nonzero(pred & ~true))
    fn = int(np.count_nonzero(~pred & true))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MetricValue("f1_positive", f1, int(true.size))


def hits_at_k(pos_scores, neg_scores, k: int) -> MetricValue:
    """Share of positives scoring strictly above the k-th highest negative."""
    pos, neg = np.asarray(pos_scores, dtype=np.float64), np.asarray(neg_scores, dtype=np.float64)
    if neg.size == 0:
        raise MetricError("hits@k needs at least one negative score")
    if k < 1 or k > neg.size:
        raise MetricError(f"k={k} outside [1, {neg.size}]")
    threshold = np.sort(neg)[::-1][k - 1]
    value = float(np.mean(pos > threshold)) if pos.size else 0.0
    return MetricValue(f"hits@{k}", value, int(pos.size))


def mae(pred, true) -> MetricValue:
    pred, true = np.asarray(pred, dtype=np.float64).ravel(), np.asarray(true, dtype=np.float64).ravel()
    if pred.shape != true.shape:
        raise MetricError(f"mae: {pred.shape} vs {true.shape}")
    return MetricValue("mae", float(np.mean(np.abs(pred - true))), int(pred.size))
