"""Graph containers, adjacency normalization, batching, generators and file I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from .tensor import DimensionError


class GraphContractError(ValueError):
    """A graph operation was called outside its contract."""


class GraphParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class GraphSchemaError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    """Directed CSR adjacency plus task data.

    Undirected graphs store both directions of every edge. Edge-aligned arrays
    (``edge_feats``, ``edge_labels``) follow CSR order, i.e. sorted by
    ``(src, dst)``.
    """

    n: int
    offsets: np.ndarray
    cols: np.ndarray
    node_feats: np.ndarray
    edge_feats: np.ndarray | None = None
    node_labels: np.ndarray | None = None
    edge_labels: np.ndarray | None = None
    graph_label: int | None = None
    graph_target: float | None = None
    undirected: bool = True
    self_loops: bool = False

    @property
    def num_edges(self) -> int:
        return int(self.offsets[-1])

    @property
    def src(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), np.diff(self.offsets))

    @property
    def dst(self) -> np.ndarray:
        return self.cols

    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    def edge_pairs(self) -> np.ndarray:
        return np.stack([self.src, self.cols], axis=1) if self.num_edges else np.zeros((0, 2), np.int64)

    def has_edge(self, i: int, j: int) -> bool:
        row = self.cols[self.offsets[i]:self.offsets[i + 1]]
        k = np.searchsorted(row, j)
        return bool(k < len(row) and row[k] == j)

    def adjacency(self) -> sp.csr_matrix:
        return sp.csr_matrix((np.ones(self.num_edges), self.cols, self.offsets), shape=(self.n, self.n))

    def validate(self) -> None:
        off, cols = self.offsets, self.cols
        if len(off) != self.n + 1 or off[0] != 0 or off[-1] != len(cols):
            raise GraphContractError("offsets must have length n+1 and end at the edge count")
        if np.any(np.diff(off) < 0):
            raise GraphContractError("offsets must be non-decreasing")
        if len(cols) and (cols.min() < 0 or cols.max() >= self.n):
            raise GraphContractError("column index out of range")
        for i in range(self.n):
            row = cols[off[i]:off[i + 1]]
            if np.any(np.diff(row) <= 0):
                raise GraphContractError(f"row {i} has unsorted or duplicate columns")
        if self.undirected and not _is_symmetric(self.adjacency()):
            raise GraphContractError("undirected graph with asymmetric adjacency")
        if self.node_feats.shape[0] != self.n:
            raise GraphContractError("node_feats row count differs from n")
        if self.edge_feats is not None and self.edge_feats.shape[0] != self.num_edges:
            raise GraphContractError("edge_feats row count differs from edge count")

    def structurally_equal(self, other: "Graph") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(np.asarray(a), np.asarray(b))

        return (self.n == other.n and same(self.offsets, other.offsets) and same(self.cols, other.cols)
                and same(self.node_feats, other.node_feats) and same(self.edge_feats, other.edge_feats)
                and same(self.node_labels, other.node_labels) and same(self.edge_labels, other.edge_labels)
                and self.graph_label == other.graph_label and self.graph_target == other.graph_target
                and self.undirected == other.undirected)


def _is_symmetric(m: sp.csr_matrix) -> bool:
    return (m != m.T).nnz == 0


def from_edges(n: int, edges: Iterable[Sequence[int]], node_feats=None, *, undirected: bool = True,
               edge_feats=None, edge_labels=None, **extra) -> Graph:
    """Build a CSR graph from ``(src, dst)`` pairs.

    For undirected graphs each pair is listed once and mirrored; aligned edge
    arrays are copied onto the mirrored direction. Duplicates are rejected.
    """
    pairs = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
    ef = None if edge_feats is None else np.asarray(edge_feats, dtype=np.float64).reshape(len(pairs), -1)
    el = None if edge_labels is None else np.asarray(edge_labels, dtype=np.int64).reshape(len(pairs))
    if len(pairs) and (pairs.min() < 0 or pairs.max() >= n):
        raise GraphContractError(f"edge endpoint out of range for n={n}")
    if undirected:
        mirror = pairs[:, 0] != pairs[:, 1]
        pairs = np.concatenate([pairs, pairs[mirror][:, ::-1]])
        ef = None if ef is None else np.concatenate([ef, ef[mirror]])
        el = None if el is None else np.concatenate([el, el[mirror]])
    order = np.lexsort((pairs[:, 1], pairs[:, 0])) if len(pairs) else np.zeros(0, np.int64)
    pairs = pairs[order]
    if len(pairs) > 1 and np.any(np.all(pairs[1:] == pairs[:-1], axis=1)):
        raise GraphContractError("duplicate edge")
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.add.at(offsets, pairs[:, 0] + 1, 1)
    offsets = np.cumsum(offsets)
    if node_feats is None:
        node_feats = np.ones((n, 1))
    node_feats = np.asarray(node_feats, dtype=np.float64).reshape(n, -1)
    g = Graph(n=n, offsets=offsets, cols=pairs[:, 1].copy(), node_feats=node_feats,
              edge_feats=None if ef is None else ef[order], edge_labels=None if el is None else el[order],
              undirected=undirected, self_loops=bool(len(pairs) and np.any(pairs[:, 0] == pairs[:, 1])),
              **extra)
    if undirected and not _is_symmetric(g.adjacency()):
        raise GraphContractError("undirected edge list is not symmetric after mirroring")
    return g


def undirected_pairs(g: Graph) -> np.ndarray:
    """Each undirected edge once, as ``src <= dst``, in CSR order."""
    p = g.edge_pairs()
    return p[p[:, 0] <= p[:, 1]]


# ---------------------------------------------------------------------------
# degree and normalization


@dataclass(frozen=True)
class DegreeVector:
    degree: np.ndarray
    self_looped: np.ndarray

    @classmethod
    def of(cls, g: Graph) -> "DegreeVector":
        d = g.degrees()
        return cls(d, d + 1)


def add_self_loops(g: Graph) -> Graph:
    if g.self_loops:
        raise GraphContractError("graph already has self-loops")
    pairs = np.concatenate([g.edge_pairs(), np.stack([np.arange(g.n)] * 2, axis=1)])
    ef = None
    if g.edge_feats is not None:
        ef = np.concatenate([g.edge_feats, np.zeros((g.n, g.edge_feats.shape[1]))])
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs = pairs[order]
    offsets = np.concatenate([[0], np.cumsum(np.bincount(pairs[:, 0], minlength=g.n))])
    return replace(g, offsets=offsets, cols=pairs[:, 1].copy(),
                   edge_feats=None if ef is None else ef[order], edge_labels=None, self_loops=True)


@dataclass(frozen=True)
class NormalizedAdjacency:
    """Symmetrically normalized adjacency with self-loops, as CSR."""

    matrix: sp.csr_matrix

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()


def sym_normalize(g: Graph) -> NormalizedAdjacency:
    if not g.undirected:
        raise GraphContractError("symmetric normalization needs an undirected graph")
    looped = g if g.self_loops else add_self_loops(g)
    deg = looped.degrees().astype(np.float64)
    src, dst = looped.src, looped.cols
    vals = 1.0 / np.sqrt(deg[src] * deg[dst])
    m = sp.csr_matrix((vals, looped.cols, looped.offsets), shape=(g.n, g.n))
    return NormalizedAdjacency(m)


def mean_adjacency(g: Graph) -> sp.csr_matrix:
    """Row ``i`` averages over in-neighbours of ``i``; empty rows stay zero."""
    src, dst = g.src, g.cols
    indeg = np.bincount(dst, minlength=g.n).astype(np.float64)
    vals = 1.0 / indeg[dst] if len(dst) else np.zeros(0)
    return sp.csr_matrix((vals, (dst, src)), shape=(g.n, g.n))


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True, eq=False)
class GraphBatch:
    graph: Graph
    graph_offsets: np.ndarray
    segments: np.ndarray
    edge_offsets: np.ndarray
    graph_labels: np.ndarray | None = None
    graph_targets: np.ndarray | None = None

    @property
    def num_graphs(self) -> int:
        return len(self.graph_offsets)

    def unbatch(self) -> list[Graph]:
        g = self.graph
        out = []
        node_bounds = np.append(self.graph_offsets, g.n)
        edge_bounds = np.append(self.edge_offsets, g.num_edges)
        for k in range(self.num_graphs):
            a, b = node_bounds[k], node_bounds[k + 1]
            ea, eb = edge_bounds[k], edge_bounds[k + 1]
            out.append(Graph(
                n=int(b - a),
                offsets=g.offsets[a:b + 1] - g.offsets[a],
                cols=g.cols[ea:eb] - a,
                node_feats=g.node_feats[a:b],
                edge_feats=None if g.edge_feats is None else g.edge_feats[ea:eb],
                node_labels=None if g.node_labels is None else g.node_labels[a:b],
                edge_labels=None if g.edge_labels is None else g.edge_labels[ea:eb],
                graph_label=None if self.graph_labels is None else int(self.graph_labels[k]),
                graph_target=None if self.graph_targets is None else float(self.graph_targets[k]),
                undirected=g.undirected, self_loops=g.self_loops,
            ))
        return out


def batch(graphs: Sequence[Graph]) -> GraphBatch:
    if not graphs:
        raise GraphContractError("cannot batch an empty list")
    f = graphs[0].node_feats.shape[1]
    ef = None if graphs[0].edge_feats is None else graphs[0].edge_feats.shape[1]
    for g in graphs:
        if g.node_feats.shape[1] != f:
            raise DimensionError(f"node feature widths differ: {f} vs {g.node_feats.shape[1]}")
        if (g.edge_feats is None) != (ef is None) or (ef is not None and g.edge_feats.shape[1] != ef):
            raise DimensionError("edge feature widths differ across the batch")
    sizes = np.array([g.n for g in graphs])
    esizes = np.array([g.num_edges for g in graphs])
    node_off = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    edge_off = np.concatenate([[0], np.cumsum(esizes)[:-1]])
    offsets = np.concatenate([[0]] + [g.offsets[1:] + e for g, e in zip(graphs, edge_off)])
    cols = np.concatenate([g.cols + o for g, o in zip(graphs, node_off)])

    def cat(attr):
        vals = [getattr(g, attr) for g in graphs]
        return None if any(v is None for v in vals) else np.concatenate(vals)

    merged = Graph(
        n=int(sizes.sum()), offsets=offsets.astype(np.int64), cols=cols.astype(np.int64),
        node_feats=np.concatenate([g.node_feats for g in graphs]),
        edge_feats=cat("edge_feats"), node_labels=cat("node_labels"), edge_labels=cat("edge_labels"),
        undirected=all(g.undirected for g in graphs), self_loops=all(g.self_loops for g in graphs),
    )
    labels = [g.graph_label for g in graphs]
    targets = [g.graph_target for g in graphs]
    return GraphBatch(
        merged, node_off.astype(np.int64), np.repeat(np.arange(len(graphs)), sizes), edge_off.astype(np.int64),
        graph_labels=None if None in labels else np.array(labels, dtype=np.int64),
        graph_targets=None if None in targets else np.array(targets, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# generators


def gen_sbm(sizes: Sequence[int], p_intra: float, p_inter: float, noise: float = 0.3,
            seed: int = 0, revealed: int | None = None) -> Graph:
    """Stochastic block model graph with node labels equal to block ids.

    Node features are one-hot block labels, each replaced with a uniformly
    random class with probability ``noise``. With ``revealed=k`` only ``k``
    nodes per class show their true one-hot label; every other node gets an
    all-zero feature row (cluster-style semi-supervision).
    """
    if not (0 <= p_intra <= 1 and 0 <= p_inter <= 1):
        raise GraphContractError("edge probabilities must lie in [0, 1]")
    if any(s < 1 for s in sizes):
        raise GraphContractError("block sizes must be >= 1")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(sizes)), sizes)
    n, C = len(labels), len(sizes)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_intra, p_inter)
    keep = rng.random(len(iu)) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    feats = np.zeros((n, C))
    if revealed is None:
        shown = labels.copy()
        flip = rng.random(n) < noise
        shown[flip] = rng.integers(0, C, size=int(flip.sum()))
        feats[np.arange(n), shown] = 1.0
    else:
        for c in range(C):
            members = np.flatnonzero(labels == c)
            pick = rng.choice(members, size=min(revealed, len(members)), replace=False)
            feats[pick, c] = 1.0
    return from_edges(n, edges, feats, node_labels=labels)


def tour_length(dist: np.ndarray, tour: Sequence[int]) -> float:
    return float(sum(dist[tour[i], tour[(i + 1) % len(tour)]] for i in range(len(tour))))


def held_karp(dist: np.ndarray) -> tuple[float, list[int]]:
    """Exact shortest Hamiltonian cycle by dynamic programming over subsets.

    Returns ``(length, tour)`` with the tour starting at node 0.
    """
    n = len(dist)
    if n == 1:
        return 0.0, [0]
    if n == 2:
        return 2 * float(dist[0, 1]), [0, 1]
    full = 1 << (n - 1)  # subsets of nodes 1..n-1; bit k stands for node k+1
    cost = np.full((full, n - 1), np.inf)
    parent = np.full((full, n - 1), -1, dtype=np.int64)
    for k in range(n - 1):
        cost[1 << k, k] = dist[0, k + 1]
    inner = dist[1:, 1:]
    bits = 1 << np.arange(n - 1)
    # masks only grow, so ascending order finalizes each state before it is extended
    for mask in range(1, full):
        free = np.flatnonzero((mask & bits) == 0)
        if len(free) == 0:
            continue
        targets = mask | bits[free]
        for last in np.flatnonzero(mask & bits):
            c = cost[mask, last]
            if c == np.inf:
                continue
            v = c + inner[last, free]
            better = v < cost[targets, free]
            cost[targets[better], free[better]] = v[better]
            parent[targets[better], free[better]] = last
    closing = cost[full - 1] + dist[1:, 0]
    last = int(np.argmin(closing))
    best = float(closing[last])
    tour, mask = [], full - 1
    while last != -1:
        tour.append(last + 1)
        prev = int(parent[mask, last])
        mask ^= 1 << last
        last = prev
    return best, [0] + tour[::-1]


def two_opt(dist: np.ndarray, seed: int = 0) -> tuple[float, list[int]]:
    """Nearest-neighbour tour improved by 2-opt moves. Approximate."""
    n = len(dist)
    tour, left = [0], set(range(1, n))
    while left:
        cur = tour[-1]
        nxt = min(left, key=lambda j: (dist[cur, j], j))
        tour.append(nxt)
        left.remove(nxt)
    improved = True
    while improved:
        improved = False
        for i in range(1, n - 1):
            for j in range(i + 1, n):
                a, b = tour[i - 1], tour[i]
                c, d = tour[j], tour[(j + 1) % n]
                if dist[a, c] + dist[b, d] < dist[a, b] + dist[c, d] - 1e-12:
                    tour[i:j + 1] = tour[i:j + 1][::-1]
                    improved = True
    return tour_length(dist, tour), tour


EXACT_TSP_LIMIT = 14


def gen_tsp(n: int, k: int, seed: int = 0, exact: bool = True, points: np.ndarray | None = None) -> Graph:
    """Random Euclidean TSP instance as a k-NN graph with tour edge labels.

    Edge feature is the Euclidean length; edge label is 1 for edges on the
    optimal tour (Held-Karp, ``exact=True``) or on a 2-opt tour otherwise.
    Tour edges missing from the k-NN graph are added.
    """
    if exact and n > EXACT_TSP_LIMIT:
        raise GraphContractError(
            f"exact labels need n <= {EXACT_TSP_LIMIT} (Held-Karp is 2^n n^2); pass exact=False for 2-opt labels")
    if not 0 < k < n:
        raise GraphContractError("need 0 < k < n")
    rng = np.random.default_rng(seed)
    pts = rng.random((n, 2)) if points is None else np.asarray(points, dtype=np.float64)
    dist = cdist(pts, pts)
    _, tour = held_karp(dist) if exact else two_opt(dist, seed)

    pairs = set()
    for i in range(n):
        order = np.argsort(dist[i], kind="stable")
        for j in [j for j in order if j != i][:k]:
            pairs.add((min(i, j), max(i, j)))
    on_tour = {(min(a, b), max(a, b)) for a, b in zip(tour, tour[1:] + tour[:1])}
    pairs |= on_tour
    pairs = sorted(pairs)
    labels = [int(p in on_tour) for p in pairs]
    lengths = [dist[i, j] for i, j in pairs]
    return from_edges(n, pairs, pts, edge_feats=lengths, edge_labels=labels)


REG_CATEGORIES = 4
REG_WEIGHTS = (1.0, 1.0, 1.0)


def triangle_count(g: Graph) -> int:
    a = g.adjacency()
    return int(round((a @ a).multiply(a).sum() / 6))


def structural_target(g: Graph, weights: Sequence[float] = REG_WEIGHTS, category: int = 0) -> float:
    """Weighted mix of average degree, triangles per node, and the share of nodes in ``category``."""
    cats = np.argmax(g.node_feats, axis=1)
    avg_deg = g.num_edges / g.n
    tri = triangle_count(g) / g.n
    share = float(np.count_nonzero(cats == category)) / g.n
    return weights[0] * avg_deg + weights[1] * tri + weights[2] * share


def _connected(n: int, edges: np.ndarray) -> bool:
    if n == 1:
        return True
    m = sp.csr_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
    k, _ = sp.csgraph.connected_components(m, directed=False)
    return k == 1


def gen_regression(n_graphs: int, size_range: tuple[int, int] = (8, 16), seed: int = 0,
                   p_edge: float = 0.3, weights: Sequence[float] = REG_WEIGHTS,
                   categories: int = REG_CATEGORIES) -> list[Graph]:
    """Connected Erdos-Renyi graphs with one-hot categories and a structural target."""
    lo, hi = size_range
    if lo < 2:
        raise GraphContractError("graph sizes must be >= 2")
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n_graphs:
        n = int(rng.integers(lo, hi + 1))
        iu, ju = np.triu_indices(n, k=1)
        keep = rng.random(len(iu)) < p_edge
        edges = np.stack([iu[keep], ju[keep]], axis=1)
        cats = rng.integers(0, categories, size=n)
        if not _connected(n, edges):
            continue
        feats = np.eye(categories)[cats]
        g = from_edges(n, edges, feats)
        out.append(replace(g, graph_target=structural_target(g, weights)))
    return out


def gen_graph_classes(n_graphs: int, n_range: tuple[int, int] = (10, 16), seed: int = 0) -> list[Graph]:
    """Small two-class set: sparse random trees-plus vs. dense random graphs.

    Class is carried by structure only. Node features are a constant 1 and the node's
    degree scaled by ``n - 1``, since a GCN on constant inputs cannot see degree.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_graphs):
        label = i % 2
        while True:
            n = int(rng.integers(n_range[0], n_range[1] + 1))
            p = 0.15 if label == 0 else 0.5
            iu, ju = np.triu_indices(n, k=1)
            keep = rng.random(len(iu)) < p
            edges = np.stack([iu[keep], ju[keep]], axis=1)
            if _connected(n, edges):
                break
        deg = np.bincount(edges.ravel(), minlength=n) / (n - 1)
        g = from_edges(n, edges, np.column_stack([np.ones(n), deg]))
        out.append(replace(g, graph_label=label))
    return out


# ---------------------------------------------------------------------------
# file I/O


def _fmt(x: float) -> float:
    return float(f"{x:.17g}")


def graph_to_record(g: Graph) -> dict:
    if g.undirected:
        mask = g.src <= g.cols
    else:
        mask = np.ones(g.num_edges, dtype=bool)
    rec: dict = {
        "n": g.n,
        "edges": g.edge_pairs()[mask].tolist(),
        "node_feats": [[_fmt(v) for v in row] for row in g.node_feats],
    }
    if not g.undirected:
        rec["directed"] = True
    if g.edge_feats is not None:
        rec["edge_feats"] = [[_fmt(v) for v in row] for row in g.edge_feats[mask]]
    if g.node_labels is not None:
        rec["node_labels"] = [int(v) for v in g.node_labels]
    if g.edge_labels is not None:
        rec["edge_labels"] = [int(v) for v in g.edge_labels[mask]]
    if g.graph_label is not None:
        rec["graph_label"] = int(g.graph_label)
    if g.graph_target is not None:
        rec["graph_target"] = _fmt(g.graph_target)
    return rec


_KNOWN = {"n", "edges", "node_feats", "edge_feats", "node_labels", "edge_labels", "graph_label",
          "graph_target", "directed"}


def graph_from_record(rec: dict, line: int = 0) -> Graph:
    if not isinstance(rec, dict):
        raise GraphParseError(line, "record is not an object")
    unknown = set(rec) - _KNOWN
    if unknown:
        raise GraphParseError(line, f"unknown fields {sorted(unknown)}")
    for key in ("n", "edges", "node_feats"):
        if key not in rec:
            raise GraphParseError(line, f"missing field {key!r}")
    n = rec["n"]
    if not isinstance(n, int) or n < 1:
        raise GraphParseError(line, "n must be a positive integer")
    feats = rec["node_feats"]
    widths = {len(r) for r in feats}
    if len(feats) != n or len(widths) > 1:
        raise GraphSchemaError(f"line {line}: node_feats must be {n} rows of equal width")
    edges = rec["edges"]
    if any(not isinstance(e, list) or len(e) != 2 for e in edges):
        raise GraphParseError(line, "edges must be [src, dst] pairs")
    ef = rec.get("edge_feats")
    if ef is not None and (len(ef) != len(edges) or len({len(r) for r in ef}) > 1):
        raise GraphSchemaError(f"line {line}: edge_feats must align with edges")
    el = rec.get("edge_labels")
    if el is not None and len(el) != len(edges):
        raise GraphSchemaError(f"line {line}: edge_labels must align with edges")
    nl = rec.get("node_labels")
    if nl is not None and len(nl) != n:
        raise GraphSchemaError(f"line {line}: node_labels must have n entries")
    try:
        return from_edges(n, edges, np.array(feats, dtype=np.float64).reshape(n, -1),
                          undirected=not rec.get("directed", False), edge_feats=ef, edge_labels=el,
                          node_labels=None if nl is None else np.array(nl, dtype=np.int64),
                          graph_label=rec.get("graph_label"), graph_target=rec.get("graph_target"))
    except GraphContractError as exc:
        raise GraphParseError(line, str(exc)) from None


def save_graphs(graphs: Sequence[Graph], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(json.dumps(graph_to_record(g), separators=(",", ":")) + "\n")


def load_graphs(path: str | Path) -> list[Graph]:
    out = []
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphParseError(lineno, f"malformed record ({exc.msg})") from None
            g = graph_from_record(rec, lineno)
            if width is None:
                width = g.node_feats.shape[1]
            elif g.node_feats.shape[1] != width:
                raise GraphSchemaError(f"line {lineno}: node feature width {g.node_feats.shape[1]} != {width}")
            out.append(g)
    return out


def permute(g: Graph, perm: np.ndarray) -> Graph:
    """Relabel node ``i`` as ``perm[i]``."""
    perm = np.asarray(perm)
    inv = np.argsort(perm)
    pairs = g.edge_pairs()
    new_pairs = perm[pairs]
    mask = np.ones(len(pairs), dtype=bool) if not g.undirected else pairs[:, 0] <= pairs[:, 1]
    return from_edges(
        g.n, new_pairs[mask], g.node_feats[inv], undirected=g.undirected,
        edge_feats=None if g.edge_feats is None else g.edge_feats[mask],
        edge_labels=None if g.edge_labels is None else g.edge_labels[mask],
        node_labels=None if g.node_labels is None else g.node_labels[inv],
        graph_label=g.graph_label, graph_target=g.graph_target,
    )

