"""Message-passing backbones and the conditional local feature encoding wrapper.

Each backbone returns a pre-activation hidden state ``h``. :func:`clfe_compose`
turns it into the layer output::

    V   = concat(H, h) @ W + b          (clfe on)
    out = act(V + h) + H                (skip on)

With clfe off the ``V`` term is dropped, which gives the plain backbone with a
residual connection.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .graph import Graph, GraphContractError, add_self_loops, mean_adjacency, sym_normalize
from .tensor import BatchNormState, DimensionError, Tensor

BACKBONES = ("gcn", "sage", "gat", "monet", "gatedgcn")

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": T.relu,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "leaky_relu": T.leaky_relu,
    "identity": T.identity,
}

GATED_EPS = 1e-6


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str = "gcn"
    d: int = 16
    clfe: bool = True
    skip: bool = True
    activation: str = "relu"
    norm: str = "none"
    heads: int = 4
    kernels: int = 3

    def __post_init__(self):
        if self.kind not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.kind!r}; choose from {BACKBONES}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.norm not in ("none", "batch"):
            raise ConfigError(f"normalization must be 'none' or 'batch', got {self.norm!r}")
        if self.kind == "gat" and (self.heads < 1 or self.d % self.heads):
            raise ConfigError(f"GAT needs heads dividing d (d={self.d}, heads={self.heads})")
        if self.kind == "monet" and self.kernels < 1:
            raise ConfigError("MoNet needs at least one kernel")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


# ---------------------------------------------------------------------------
# per-graph precomputation


@dataclass
class GraphContext:
    """Index arrays and constant matrices a forward pass needs for one graph."""

    graph: Graph
    n: int
    src: np.ndarray
    dst: np.ndarray
    loop_src: np.ndarray
    loop_dst: np.ndarray
    norm_adj: sp.csr_matrix
    mean_adj: sp.csr_matrix
    pseudo: np.ndarray

    @classmethod
    def build(cls, g: Graph) -> "GraphContext":
        looped = g if g.self_loops else add_self_loops(g)
        ls, ld = looped.src, looped.cols
        deg = np.bincount(ld, minlength=g.n).astype(np.float64)
        pseudo = np.stack([1.0 / np.sqrt(deg[ld]), 1.0 / np.sqrt(deg[ls])], axis=1)
        return cls(
            graph=g, n=g.n, src=g.src, dst=g.cols.copy(), loop_src=ls, loop_dst=ld,
            norm_adj=sym_normalize(g).matrix, mean_adj=mean_adjacency(g), pseudo=pseudo,
        )


# ---------------------------------------------------------------------------
# backbones


def _check_rows(H: Tensor, ctx: GraphContext) -> None:
    if H.shape[0] != ctx.n:
        raise DimensionError(f"feature matrix has {H.shape[0]} rows for a {ctx.n}-node graph")


def gcn_hidden(H: Tensor, ctx: GraphContext, P: dict[str, Tensor]) -> Tensor:
    _check_rows(H, ctx)
    return T.matmul(T.spmm(ctx.norm_adj, H), P["W"])


def sage_hidden(H: Tensor, ctx: GraphContext, P: dict[str, Tensor]) -> Tensor:
    _check_rows(H, ctx)
    neigh = T.spmm(ctx.mean_adj, H)
    return T.matmul(T.concat_cols(H, neigh), P["W"])


def gat_attention(H: Tensor, ctx: GraphContext, P: dict[str, Tensor], heads: int) -> list[tuple[Tensor, Tensor]]:
    """Per head: projected features and attention weights over the self-looped edges."""
    out = []
    src, dst = ctx.loop_src, ctx.loop_dst
    for k in range(heads):
        Z = T.matmul(H, P[f"W{k}"])
        s_dst = T.matmul(Z, P[f"a_dst{k}"])
        s_src = T.matmul(Z, P[f"a_src{k}"])
        e = T.leaky_relu(T.add(T.gather_rows(s_dst, dst), T.gather_rows(s_src, src)), 0.2)
        out.append((Z, T.segment_softmax(e, dst, ctx.n)))
    return out


def gat_hidden(H: Tensor, ctx: GraphContext, P: dict[str, Tensor], heads: int) -> Tensor:
    _check_rows(H, ctx)
    parts = []
    for Z, alpha in gat_attention(H, ctx, P, heads):
        msg = T.mul(T.gather_rows(Z, ctx.loop_src), alpha)
        parts.append(T.scatter_add(msg, ctx.loop_dst, ctx.n))
    return T.concat_many(parts)


def monet_weights(ctx: GraphContext, P: dict[str, Tensor], k: int) -> Tensor:
    """Gaussian kernel weight of kernel ``k`` on each self-looped edge, as a column."""
    u = Tensor(ctx.pseudo)
    inv_sigma = T.exp(T.scale(P[f"log_sigma{k}"], -1.0))
    quad = T.sum_cols(T.mul(T.square(T.sub(u, P[f"mu{k}"])), inv_sigma))
    return T.exp(T.scale(quad, -0.5))


def monet_hidden(H: Tensor, ctx: GraphContext, P: dict[str, Tensor], kernels: int) -> Tensor:
    _check_rows(H, ctx)
    total = None
    for k in range(kernels):
        Z = T.matmul(H, P[f"W{k}"])
        msg = T.mul(T.gather_rows(Z, ctx.loop_src), monet_weights(ctx, P, k))
        agg = T.scatter_add(msg, ctx.loop_dst, ctx.n)
        total = agg if total is None else T.add(total, agg)
    return T.scale(total, 1.0 / kernels)


def gatedgcn_gates(H: Tensor, E: Tensor, ctx: GraphContext, P: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Edge logits and normalized gates for every directed edge."""
    e_hat = T.add(T.matmul(E, P["A"]),
                  T.add(T.gather_rows(T.matmul(H, P["B"]), ctx.dst),
                        T.gather_rows(T.matmul(H, P["C"]), ctx.src)))
    sig = T.sigmoid(e_hat)
    denom = T.gather_rows(T.scatter_add(sig, ctx.dst, ctx.n), ctx.dst)
    eta = T.div(sig, T.add(denom, Tensor(GATED_EPS)))
    return e_hat, eta


def gatedgcn_hidden(H: Tensor, E: Tensor | None, ctx: GraphContext, P: dict[str, Tensor],
                    edge_norm: Callable[[Tensor], Tensor] = T.identity) -> tuple[Tensor, Tensor]:
    _check_rows(H, ctx)
    if E is None:
        raise GraphContractError("GatedGCN needs an edge state")
    if E.shape[0] != len(ctx.src):
        raise DimensionError(f"edge state has {E.shape[0]} rows for {len(ctx.src)} edges")
    e_hat, eta = gatedgcn_gates(H, E, ctx, P)
    msg = T.mul(eta, T.gather_rows(T.matmul(H, P["V"]), ctx.src))
    h = T.add(T.matmul(H, P["U"]), T.scatter_add(msg, ctx.dst, ctx.n))
    E_next = T.add(E, T.relu(edge_norm(e_hat)))
    return h, E_next


# ---------------------------------------------------------------------------
# composition


def clfe_compose(H: Tensor, h: Tensor, P: dict[str, Tensor], spec: LayerSpec) -> Tensor:
    if H.shape != h.shape:
        raise DimensionError(f"layer input {H.shape} and hidden state {h.shape} must match")
    act = ACTIVATIONS[spec.activation]
    if spec.clfe:
        V = T.add(T.matmul(T.concat_cols(H, h), P["clfe_W"]), P["clfe_b"])
        out = act(T.add(V, h))
    else:
        out = act(h)
    return T.add(out, H) if spec.skip else out


def init_backbone(spec: LayerSpec, rng: np.random.Generator) -> dict[str, Tensor]:
    d = spec.d
    if spec.kind == "gcn":
        return {"W": glorot(rng, d, d)}
    if spec.kind == "sage":
        return {"W": glorot(rng, 2 * d, d)}
    if spec.kind == "gat":
        dk = d // spec.heads
        P = {}
        for k in range(spec.heads):
            P[f"W{k}"] = glorot(rng, d, dk)
            P[f"a_src{k}"] = glorot(rng, dk, 1)
            P[f"a_dst{k}"] = glorot(rng, dk, 1)
        return P
    if spec.kind == "monet":
        P = {}
        for k in range(spec.kernels):
            P[f"W{k}"] = glorot(rng, d, d)
            P[f"mu{k}"] = Tensor(rng.uniform(0.0, 1.0, size=(1, 2)), requires_grad=True)
            P[f"log_sigma{k}"] = Tensor(np.zeros((1, 2)), requires_grad=True)
        return P
    return {name: glorot(rng, d, d) for name in ("A", "B", "C", "U", "V")}


class Layer:
    """One message-passing layer: backbone, composition, optional batch norm."""

    def __init__(self, spec: LayerSpec, rng: np.random.Generator, clfe_rng: np.random.Generator):
        self.spec = spec
        self.params = init_backbone(spec, rng)
        d = spec.d
        if spec.clfe:
            self.params["clfe_W"] = glorot(clfe_rng, 2 * d, d)
            self.params["clfe_b"] = zeros(d)
        self.bn = None
        self.edge_bn = None
        if spec.norm == "batch":
            self.params["bn_gamma"] = Tensor(np.ones(d), requires_grad=True)
            self.params["bn_beta"] = zeros(d)
            self.bn = BatchNormState.fresh(d)
            if spec.kind == "gatedgcn":
                self.params["edge_bn_gamma"] = Tensor(np.ones(d), requires_grad=True)
                self.params["edge_bn_beta"] = zeros(d)
                self.edge_bn = BatchNormState.fresh(d)

    def hidden(self, H: Tensor, ctx: GraphContext, E: Tensor | None = None,
               training: bool = True) -> tuple[Tensor, Tensor | None]:
        s, P = self.spec, self.params
        if s.kind == "gcn":
            return gcn_hidden(H, ctx, P), E
        if s.kind == "sage":
            return sage_hidden(H, ctx, P), E
        if s.kind == "gat":
            return gat_hidden(H, ctx, P, s.heads), E
        if s.kind == "monet":
            return monet_hidden(H, ctx, P, s.kernels), E
        norm = T.identity
        if self.edge_bn is not None:
            def norm(x):
                return T.batch_norm(x, P["edge_bn_gamma"], P["edge_bn_beta"], self.edge_bn, training)
        return gatedgcn_hidden(H, E, ctx, P, norm)

    def __call__(self, H: Tensor, ctx: GraphContext, E: Tensor | None = None,
                 training: bool = True) -> tuple[Tensor, Tensor | None]:
        h, E = self.hidden(H, ctx, E, training)
        out = clfe_compose(H, h, self.params, self.spec)
        if self.bn is not None:
            out = T.batch_norm(out, self.params["bn_gamma"], self.params["bn_beta"], self.bn, training)
        return out, E


@dataclass
class Linear:
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, fan_in: int, fan_out: int) -> "Linear":
        return cls(glorot(rng, fan_in, fan_out), zeros(fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.W), self.b)


@dataclass
class Encoder:
    """Input embedding followed by ``L`` stacked layers of equal width."""

    in_dim: int
    specs: list[LayerSpec]
    seed: int = 0
    edge_dim: int = 1
    embed: Linear = field(init=False)
    edge_embed: Linear | None = field(init=False, default=None)
    layers: list[Layer] = field(init=False)

    def __post_init__(self):
        if self.specs and len({s.d for s in self.specs}) != 1:
            raise ConfigError("every layer must share the same width")
        d = self.specs[0].d if self.specs else None
        # separate streams so toggling CLFE leaves the backbone initialization untouched
        base, clfe_ss = np.random.SeedSequence(self.seed).spawn(2)
        rng, clfe_rng = np.random.default_rng(base), np.random.default_rng(clfe_ss)
        self.embed = Linear.init(rng, self.in_dim, d if d is not None else self.in_dim)
        if any(s.kind == "gatedgcn" for s in self.specs):
            self.edge_embed = Linear.init(rng, self.edge_dim, d)
        self.layers = [Layer(s, rng, clfe_rng) for s in self.specs]

    @property
    def width(self) -> int:
        return self.specs[0].d if self.specs else self.in_dim

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [("embed.W", self.embed.W), ("embed.b", self.embed.b)]
        if self.edge_embed is not None:
            out += [("edge_embed.W", self.edge_embed.W), ("edge_embed.b", self.edge_embed.b)]
        for i, layer in enumerate(self.layers):
            out += [(f"layers.{i}.{k}", v) for k, v in layer.params.items()]
        return out

    def edge_inputs(self, g: Graph) -> np.ndarray:
        if g.edge_feats is not None:
            return g.edge_feats
        return np.ones((g.num_edges, self.edge_dim))

    def __call__(self, ctx: GraphContext, X: Tensor | None = None, training: bool = True) -> Tensor:
        return stack_forward(self, ctx, X, training)


def stack_forward(model: Encoder, ctx: GraphContext, X: Tensor | None = None, training: bool = True) -> Tensor:
    """Embed node inputs to width ``d`` and run every layer in order."""
    X = Tensor(ctx.graph.node_feats) if X is None else X
    H = model.embed(X)
    E = None
    if model.edge_embed is not None:
        E = model.edge_embed(Tensor(model.edge_inputs(ctx.graph)))
    for layer in model.layers:
        H, E = layer(H, ctx, E, training)
    return H
