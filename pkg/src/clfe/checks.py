"""Finite-difference gradient suite for the message-passing layers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graph import Graph, from_edges
from .layers import Encoder, GraphContext, LayerSpec


@dataclass
class SuiteReport:
    backbone: str
    clfe: bool
    max_rel_error: float
    checked: int
    skipped: int
    per_param: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol and self.checked > 0


def random_graph(n: int, p: float, rng: np.random.Generator, feat_dim: int = 3,
                 edge_dim: int | None = None) -> Graph:
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    ef = None if edge_dim is None else rng.normal(size=(len(edges), edge_dim))
    return from_edges(n, edges, rng.normal(size=(n, feat_dim)), edge_feats=ef)


def layer_gradient_suite(kind: str, clfe: bool, seed: int = 0, n: int = 6, d: int = 4, depth: int = 2,
                         h: float = 1e-5, tol: float = 1e-4) -> SuiteReport:
    """Check every encoder parameter of a ``depth``-layer stack against central differences.

    The scalar under test is a fixed random projection of the node outputs.
    """
    rng = np.random.default_rng(seed)
    g = random_graph(n, 0.5, rng, edge_dim=2 if kind == "gatedgcn" else None)
    heads = 2 if kind == "gat" else 4
    spec = LayerSpec(kind, d, clfe, heads=heads, kernels=2)
    enc = Encoder(g.node_feats.shape[1], [spec] * depth, seed=seed, edge_dim=2)
    if clfe:
        # non-zero bias so the bias path is exercised away from its initial value
        for layer in enc.layers:
            layer.params["clfe_b"].data[...] = rng.normal(scale=0.1, size=d)
    ctx = GraphContext.build(g)
    proj = T.Tensor(rng.normal(size=(n, d)))

    def loss(_):
        return T.sum_all(T.mul(enc(ctx), proj))

    report = SuiteReport(kind, clfe, 0.0, 0, 0, tol=tol)
    for name, p in enc.parameters():
        rep = T.grad_check(loss, p, h=h, tol=tol)
        report.per_param[name] = rep.max_rel_error
        report.max_rel_error = max(report.max_rel_error, rep.max_rel_error)
        report.checked += rep.checked
        report.skipped += len(rep.skipped)
    return report
