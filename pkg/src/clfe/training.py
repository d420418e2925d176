"""Optimizer, learning-rate schedule, task models and the seeded training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .graph import Graph, GraphBatch, batch as make_batch, undirected_pairs
from .heads import Mlp2, accuracy_weighted, edge_head, f1_positive, graph_head, hits_at_k, mae, node_head
from .layers import Encoder, GraphContext, LayerSpec
from .tensor import Tensor

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (9, 23, 41, 42)
TASKS = ("node_cls", "graph_cls", "edge_cls", "graph_reg")


class TrainingAborted(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place. Parameters without a gradient are skipped."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# schedule


@dataclass
class ScheduleState:
    lr: float
    factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-6
    best: float = math.inf
    bad_epochs: int = 0
    decays: int = 0

    @property
    def halted(self) -> bool:
        return self.lr < self.min_lr


def plateau_decay(state: ScheduleState, val_loss: float) -> ScheduleState:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""
    if not math.isfinite(val_loss):
        raise ValueError("validation loss must be finite")
    if val_loss < state.best - 1e-12:
        state.best = val_loss
        state.bad_epochs = 0
        return state
    state.bad_epochs += 1
    if state.bad_epochs >= state.patience:
        state.lr *= state.factor
        state.decays += 1
        state.bad_epochs = 0
    return state


# ---------------------------------------------------------------------------
# task model


def class_balance_weights(labels: np.ndarray, num_classes: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    return np.where(counts > 0, len(labels) / np.maximum(counts, 1.0), 0.0)


@dataclass
class Prepared:
    """A batch with its precomputed graph context."""

    batch: GraphBatch
    ctx: GraphContext
    edges: np.ndarray | None = None
    edge_labels: np.ndarray | None = None

    @classmethod
    def of(cls, graphs: Sequence[Graph], task: str) -> "Prepared":
        b = make_batch(graphs)
        p = cls(b, GraphContext.build(b.graph))
        if task == "edge_cls":
            g = b.graph
            mask = g.src <= g.cols
            p.edges = g.edge_pairs()[mask]
            p.edge_labels = g.edge_labels[mask]
        return p

    def targets(self, task: str) -> np.ndarray:
        if task == "node_cls":
            return self.batch.graph.node_labels
        if task == "graph_cls":
            return self.batch.graph_labels
        if task == "edge_cls":
            return self.edge_labels
        return self.batch.graph_targets


class TaskModel:
    """Encoder plus the head and loss for one of the four task families."""

    def __init__(self, task: str, in_dim: int, specs: Sequence[LayerSpec], num_classes: int = 2,
                 seed: int = 0, edge_dim: int = 1, class_weighted: bool = True):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}; choose from {TASKS}")
        self.task = task
        self.num_classes = num_classes
        self.class_weighted = class_weighted and task in ("node_cls", "edge_cls")
        self.encoder = Encoder(in_dim, list(specs), seed, edge_dim)
        d = self.encoder.width
        out = 1 if task == "graph_reg" else num_classes
        head_in = 2 * d if task == "edge_cls" else d
        self.mlp = Mlp2.init(np.random.default_rng([seed, 7]), head_in, out)
        self.frozen: set[str] = set()

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.encoder.parameters() + self.mlp.parameters()

    def parameters(self) -> list[Tensor]:
        return [p for name, p in self.named_parameters() if name not in self.frozen]

    def zero_clfe(self) -> None:
        """Pin every CLFE weight and bias at zero and exclude them from training."""
        for name, p in self.named_parameters():
            if name.endswith("clfe_W") or name.endswith("clfe_b"):
                p.data[...] = 0.0
                self.frozen.add(name)

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for _, p in self.named_parameters()]

    def restore(self, snap: Sequence[np.ndarray]) -> None:
        for (_, p), s in zip(self.named_parameters(), snap):
            p.data[...] = s

    def forward(self, prep: Prepared, training: bool = True) -> Tensor:
        H = self.encoder(prep.ctx, training=training)
        if self.task == "node_cls":
            return node_head(H, self.mlp)
        if self.task == "edge_cls":
            return edge_head(H, prep.edges, self.mlp)
        return graph_head(H, prep.batch.segments, self.mlp, prep.batch.num_graphs)

    def loss(self, out: Tensor, prep: Prepared) -> Tensor:
        y = prep.targets(self.task)
        if self.task == "graph_reg":
            return T.l1_loss(out, y)
        w = class_balance_weights(y, self.num_classes) if self.class_weighted else None
        return T.softmax_cross_entropy(out, y, w)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    lr: float = 1e-3
    decay_factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-6
    max_epochs: int = 200
    batch_size: int = 32
    seed: int = 41
    metric: str = "auto"
    hits_k: int = 50


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_metric: float
    val_metric: float
    test_metric: float
    lr: float
    seconds: float

    FIELDS = ("epoch", "train_loss", "val_loss", "train_metric", "val_metric", "test_metric", "lr", "seconds")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


def write_epoch_csv(records: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(EpochRecord.FIELDS)
        for r in records:
            w.writerow([r.epoch] + [repr(float(x)) for x in r.row()[1:]])


@dataclass
class RunResult:
    seed: int
    metric: str
    test_metric: float
    val_metric: float
    train_metric: float
    best_epoch: int
    epochs: int
    halted_by_lr: bool
    records: list[EpochRecord] = field(default_factory=list)
    failed: bool = False
    error: str = ""
    decays: int = 0


def default_metric(task: str) -> str:
    return {"node_cls": "accuracy_weighted", "graph_cls": "accuracy_weighted",
            "edge_cls": "f1_positive", "graph_reg": "mae"}[task]


def _metric(name: str, model: TaskModel, outs: list[np.ndarray], ys: list[np.ndarray], hits_k: int) -> float:
    out, y = np.concatenate(outs), np.concatenate(ys)
    if name == "mae":
        return mae(out.ravel(), y).value
    if name == "accuracy_weighted":
        return accuracy_weighted(out.argmax(axis=1), y, model.num_classes).value
    if name == "f1_positive":
        return f1_positive(out.argmax(axis=1) == 1, y == 1).value
    if name == "hits_at_k":
        score = out[:, 1] - out[:, 0]
        neg = score[y == 0]
        return hits_at_k(score[y == 1], neg, min(hits_k, len(neg))).value
    raise ValueError(f"unknown metric {name!r}")


def evaluate(model: TaskModel, preps: Sequence[Prepared], metric: str, hits_k: int = 50) -> tuple[float, float]:
    """Mean loss and metric over prepared batches, in eval mode."""
    outs, ys, total, count = [], [], 0.0, 0
    with T.no_grad():
        for p in preps:
            out = model.forward(p, training=False)
            y = p.targets(model.task)
            total += model.loss(out, p).item() * len(y)
            count += len(y)
            outs.append(out.data)
            ys.append(y)
    return total / count, _metric(metric, model, outs, ys, hits_k)


def _chunks(graphs: Sequence[Graph], size: int) -> list[list[Graph]]:
    return [list(graphs[i:i + size]) for i in range(0, len(graphs), size)]


def train(model: TaskModel, datasets: dict[str, Sequence[Graph]], cfg: TrainConfig,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> RunResult:
    """Train until the learning rate falls below ``cfg.min_lr`` or ``max_epochs`` pass.

    Reported metrics come from the epoch with the lowest validation loss, and the
    model is left holding that epoch's parameters.
    """
    metric = default_metric(model.task) if cfg.metric == "auto" else cfg.metric
    train_set = list(datasets["train"])
    evals = {k: [Prepared.of(c, model.task) for c in _chunks(datasets[k], cfg.batch_size)]
             for k in ("train", "val", "test")}
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    adam = AdamState()
    sched = ScheduleState(cfg.lr, cfg.decay_factor, cfg.patience, cfg.min_lr)
    records: list[EpochRecord] = []
    best = (math.inf, -1, None, None)
    # full-batch when the training set fits in one batch, so no per-epoch rebuild
    fixed = evals["train"] if len(train_set) <= cfg.batch_size else None

    for epoch in range(cfg.max_epochs):
        start = time.perf_counter()
        if fixed is not None:
            batches = fixed
        else:
            order = rng.permutation(len(train_set))
            batches = [Prepared.of([train_set[i] for i in order[j:j + cfg.batch_size]], model.task)
                       for j in range(0, len(order), cfg.batch_size)]
        for bi, prep in enumerate(batches):
            for p in params:
                p.zero_grad()
            with T.recording() as tape:
                loss = model.loss(model.forward(prep, training=True), prep)
                if not math.isfinite(loss.item()):
                    raise TrainingAborted(f"non-finite loss at epoch {epoch}, batch {bi}, lr {sched.lr:g}")
                tape.backward(loss)
            adam_step(params, adam, sched.lr)

        tr_loss, tr_metric = evaluate(model, evals["train"], metric, cfg.hits_k)
        va_loss, va_metric = evaluate(model, evals["val"], metric, cfg.hits_k)
        _, te_metric = evaluate(model, evals["test"], metric, cfg.hits_k)
        if not math.isfinite(va_loss):
            raise TrainingAborted(f"non-finite validation loss at epoch {epoch}, lr {sched.lr:g}")
        rec = EpochRecord(epoch, tr_loss, va_loss, tr_metric, va_metric, te_metric, sched.lr,
                          time.perf_counter() - start)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if va_loss < best[0]:
            best = (va_loss, epoch, rec, model.snapshot())
        plateau_decay(sched, va_loss)
        if sched.halted:
            break

    _, best_epoch, best_rec, snap = best
    model.restore(snap)
    return RunResult(cfg.seed, metric, best_rec.test_metric, best_rec.val_metric, best_rec.train_metric,
                     best_epoch, len(records), sched.halted, records, decays=sched.decays)


# ---------------------------------------------------------------------------
# multi-seed aggregation


@dataclass
class Aggregate:
    metric: str
    seeds: list[int]
    values: list[float]
    mean: float
    std: float
    failed: list[int] = field(default_factory=list)
    runs: list[RunResult] = field(default_factory=list)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation; a single value has std 0."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return math.nan, math.nan
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def run_seeds(run_one: Callable[[int], RunResult], seeds: Sequence[int] | None = None) -> Aggregate:
    """Run ``run_one(seed)`` per seed and aggregate the final test metric.

    A seed whose run raises is recorded as failed; statistics cover the rest.
    """
    seeds = list(DEFAULT_SEEDS if seeds is None else seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    runs, failed = [], []
    for s in seeds:
        try:
            runs.append(run_one(s))
        except (TrainingAborted, FloatingPointError) as exc:
            log.warning("seed %d failed: %s", s, exc)
            failed.append(s)
    values = [r.test_metric for r in runs]
    m, sd = mean_std(values)
    metric = runs[0].metric if runs else "unknown"
    return Aggregate(metric, [r.seed for r in runs], values, m, sd, failed, runs)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
