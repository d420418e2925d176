"""Experiment runner: config parsing, baseline-vs-CLFE runs and report output.

Usage::

    clfe run --config exp.cfg [--out DIR] [--seeds 9,23,41,42] [--arms baseline,clfe]
    clfe gen --kind sbm|tsp|reg|graphcls --out graphs.jsonl [--count N] [--seed S]
    clfe gradcheck --backbone gcn
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .checks import layer_gradient_suite
from .graph import (Graph, gen_graph_classes, gen_regression, gen_sbm, gen_tsp, load_graphs, save_graphs)
from .layers import BACKBONES, LayerSpec
from .training import (DEFAULT_SEEDS, TASKS, Aggregate, RunResult, TaskModel, TrainConfig, run_seeds,
                       train, write_epoch_csv)

log = logging.getLogger("clfe")

ARMS = ("baseline", "clfe")
DATASETS = ("sbm", "tsp", "reg", "graphcls", "file")


class ConfigParseError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(conv):
    def parse(text: str):
        return [conv(t.strip()) for t in text.split(",") if t.strip()]
    parse.__name__ = f"list[{conv.__name__}]"
    return parse


@dataclass
class ExperimentConfig:
    task: str
    backbone: str
    dataset: str
    data_path: str = ""
    num_graphs: int = 60
    data_seed: int = 0
    split: list = field(default_factory=lambda: [0.6, 0.2, 0.2])
    # sbm
    blocks: int = 4
    block_size: int = 15
    block_jitter: int = 3
    p_intra: float = 0.3
    p_inter: float = 0.05
    noise: float = 0.3
    revealed: int = -1
    # tsp
    tsp_nodes: int = 10
    tsp_k: int = 4
    # regression / graph classification
    min_size: int = 8
    max_size: int = 16
    p_edge: float = 0.3
    # model
    layers: list = field(default_factory=lambda: [4])
    hidden: int = 16
    activation: str = "relu"
    norm: str = "none"
    skip: bool = True
    heads: int = 4
    kernels: int = 3
    arms: list = field(default_factory=lambda: list(ARMS))
    zero_clfe: bool = False
    class_weighted: bool = True
    # training
    lr: float = 1e-3
    decay_factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-6
    max_epochs: int = 200
    batch_size: int = 32
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    metric: str = "auto"
    hits_k: int = 50
    out: str = "results"

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigParseError(f"task: expected one of {TASKS}, got {self.task!r}")
        if self.backbone not in BACKBONES:
            raise ConfigParseError(f"backbone: expected one of {BACKBONES}, got {self.backbone!r}")
        if self.dataset not in DATASETS:
            raise ConfigParseError(f"dataset: expected one of {DATASETS}, got {self.dataset!r}")
        if self.dataset == "file" and not self.data_path:
            raise ConfigParseError("data_path: required when dataset = file")
        if not self.layers or min(self.layers) < 1:
            raise ConfigParseError("layers: every depth must be at least 1")
        if not self.arms or set(self.arms) - set(ARMS):
            raise ConfigParseError(f"arms: choose from {ARMS}")
        if not self.seeds:
            raise ConfigParseError("seeds: need at least one seed")
        if len(self.split) != 3 or any(s < 0 for s in self.split) or not math.isclose(sum(self.split), 1.0):
            raise ConfigParseError("split: three non-negative fractions summing to 1")
        try:
            self.layer_spec(self.layers[0], True)
        except ValueError as exc:
            raise ConfigParseError(f"model: {exc}") from None

    def layer_spec(self, depth: int, clfe: bool) -> list[LayerSpec]:
        spec = LayerSpec(self.backbone, self.hidden, clfe, self.skip, self.activation, self.norm,
                         self.heads, self.kernels)
        return [spec] * depth

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.lr, self.decay_factor, self.patience, self.min_lr, self.max_epochs,
                           self.batch_size, seed, self.metric, self.hits_k)

    def render(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_CONVERTERS = {
    int: int, float: float, str: str, bool: _bool,
}
_LIST_TYPES = {"split": _list(float), "layers": _list(int), "arms": _list(str), "seeds": _list(int)}
REQUIRED = ("task", "backbone", "dataset")


def _converter(name: str):
    if name in _LIST_TYPES:
        return _LIST_TYPES[name]
    default = {f.name: f for f in fields(ExperimentConfig)}[name]
    typ = {"int": int, "float": float, "str": str, "bool": bool}[default.type]
    return _CONVERTERS[typ]


def parse_config_text(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    known = {f.name for f in fields(ExperimentConfig)}
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigParseError(f"{key}: unknown key (line {lineno})")
        raw[key] = value
    raw.update(overrides or {})
    missing = [k for k in REQUIRED if k not in raw]
    if missing:
        raise ConfigParseError(f"{missing[0]}: required key missing")
    values = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigParseError(f"{key}: unknown key")
        try:
            values[key] = _converter(key)(value)
        except ValueError as exc:
            raise ConfigParseError(f"{key}: {exc}") from None
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def parse_config(path: str | Path, overrides: dict[str, str] | None = None,
                 echo: bool = True) -> ExperimentConfig:
    cfg = parse_config_text(Path(path).read_text(encoding="utf-8"), overrides)
    if echo:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(cfg.render(), encoding="utf-8")
    return cfg


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Datasets:
    train: list[Graph]
    val: list[Graph]
    test: list[Graph]
    in_dim: int
    edge_dim: int
    num_classes: int

    def as_dict(self) -> dict[str, list[Graph]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def generate_graphs(cfg: ExperimentConfig) -> list[Graph]:
    rng = np.random.default_rng(cfg.data_seed)
    seeds = rng.integers(0, 2**31 - 1, size=cfg.num_graphs)
    if cfg.dataset == "sbm":
        out = []
        for s in seeds:
            sub = np.random.default_rng(int(s))
            sizes = [int(cfg.block_size + sub.integers(-cfg.block_jitter, cfg.block_jitter + 1))
                     for _ in range(cfg.blocks)]
            out.append(gen_sbm([max(1, x) for x in sizes], cfg.p_intra, cfg.p_inter, cfg.noise, int(s),
                               revealed=None if cfg.revealed < 0 else cfg.revealed))
        return out
    if cfg.dataset == "tsp":
        return [gen_tsp(cfg.tsp_nodes, cfg.tsp_k, int(s)) for s in seeds]
    if cfg.dataset == "reg":
        return gen_regression(cfg.num_graphs, (cfg.min_size, cfg.max_size), cfg.data_seed, cfg.p_edge)
    if cfg.dataset == "graphcls":
        return gen_graph_classes(cfg.num_graphs, (cfg.min_size, cfg.max_size), cfg.data_seed)
    return load_graphs(cfg.data_path)


def build_datasets(cfg: ExperimentConfig) -> Datasets:
    graphs = generate_graphs(cfg)
    n = len(graphs)
    n_train = int(round(cfg.split[0] * n))
    n_val = int(round(cfg.split[1] * n))
    train, val, test = graphs[:n_train], graphs[n_train:n_train + n_val], graphs[n_train + n_val:]
    if not train or not val or not test:
        raise ConfigParseError("split: every split needs at least one graph")
    if cfg.task == "node_cls":
        num_classes = int(max(g.node_labels.max() for g in graphs)) + 1
    elif cfg.task == "graph_cls":
        num_classes = int(max(g.graph_label for g in graphs)) + 1
    else:
        num_classes = 2
    g0 = graphs[0]
    edge_dim = 1 if g0.edge_feats is None else g0.edge_feats.shape[1]
    return Datasets(train, val, test, g0.node_feats.shape[1], edge_dim, num_classes)


# ---------------------------------------------------------------------------
# A/B runs


@dataclass
class ComparisonRow:
    backbone: str
    layers: int
    metric: str
    baseline_mean: float = math.nan
    baseline_std: float = math.nan
    clfe_mean: float = math.nan
    clfe_std: float = math.nan
    baseline_values: list = field(default_factory=list)
    clfe_values: list = field(default_factory=list)
    baseline_failed: list = field(default_factory=list)
    clfe_failed: list = field(default_factory=list)

    @property
    def delta(self) -> float:
        return self.clfe_mean - self.baseline_mean

    @property
    def direction(self) -> str:
        d = self.delta
        if math.isnan(d) or d == 0:
            return ""
        return "↑" if d > 0 else "↓"


@dataclass
class ComparisonTable:
    rows: list[ComparisonRow] = field(default_factory=list)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ComparisonTable) or len(self.rows) != len(other.rows):
            return False
        return all(_row_key(a) == _row_key(b) for a, b in zip(self.rows, other.rows))

    @property
    def complete(self) -> bool:
        return all(not r.baseline_failed and not r.clfe_failed for r in self.rows)


def _row_key(r: ComparisonRow):
    def norm(x):
        return "nan" if isinstance(x, float) and math.isnan(x) else x
    return tuple(norm(getattr(r, f.name)) if not isinstance(getattr(r, f.name), list)
                 else tuple(getattr(r, f.name)) for f in fields(r))


def run_single(cfg: ExperimentConfig, data: Datasets, depth: int, arm: str, seed: int,
               log_dir: Path | None = None) -> RunResult:
    clfe = arm == "clfe"
    model = TaskModel(cfg.task, data.in_dim, cfg.layer_spec(depth, clfe), data.num_classes, seed,
                      data.edge_dim, cfg.class_weighted)
    if clfe and cfg.zero_clfe:
        model.zero_clfe()
    result = train(model, data.as_dict(), cfg.train_config(seed))
    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
        write_epoch_csv(result.records, log_dir / f"{cfg.backbone}_L{depth}_{arm}_seed{seed}.csv")
    log.info("%s L=%d %s seed=%d: test %s = %.6f (best epoch %d of %d)", cfg.backbone, depth, arm, seed,
             result.metric, result.test_metric, result.best_epoch, result.epochs)
    return result


def run_ab(cfg: ExperimentConfig, data: Datasets | None = None, log_dir: Path | None = None) -> ComparisonTable:
    """Train every requested arm at every depth on one shared dataset and seed list."""
    data = build_datasets(cfg) if data is None else data
    table = ComparisonTable()
    for depth in cfg.layers:
        row = None
        for arm in cfg.arms:
            agg: Aggregate = run_seeds(lambda s: run_single(cfg, data, depth, arm, s, log_dir), cfg.seeds)
            if row is None:
                row = ComparisonRow(cfg.backbone, depth, agg.metric)
            setattr(row, f"{arm}_mean", agg.mean)
            setattr(row, f"{arm}_std", agg.std)
            setattr(row, f"{arm}_values", agg.values)
            setattr(row, f"{arm}_failed", agg.failed)
        table.rows.append(row)
    return table


# ---------------------------------------------------------------------------
# reports

CSV_FIELDS = ("backbone", "layers", "metric", "baseline_mean", "baseline_std", "clfe_mean", "clfe_std",
              "delta", "direction", "baseline_values", "clfe_values", "baseline_failed", "clfe_failed")


def _f(x: float) -> str:
    return repr(float(x))


def write_csv(table: ComparisonTable, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in table.rows:
            w.writerow([r.backbone, r.layers, r.metric, _f(r.baseline_mean), _f(r.baseline_std),
                        _f(r.clfe_mean), _f(r.clfe_std), _f(r.delta), r.direction,
                        ";".join(_f(v) for v in r.baseline_values), ";".join(_f(v) for v in r.clfe_values),
                        ";".join(str(s) for s in r.baseline_failed), ";".join(str(s) for s in r.clfe_failed)])


def read_csv(path: Path) -> ComparisonTable:
    def floats(s):
        return [float(x) for x in s.split(";") if x]

    def ints(s):
        return [int(x) for x in s.split(";") if x]

    table = ComparisonTable()
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            table.rows.append(ComparisonRow(
                rec["backbone"], int(rec["layers"]), rec["metric"],
                float(rec["baseline_mean"]), float(rec["baseline_std"]),
                float(rec["clfe_mean"]), float(rec["clfe_std"]),
                floats(rec["baseline_values"]), floats(rec["clfe_values"]),
                ints(rec["baseline_failed"]), ints(rec["clfe_failed"]),
            ))
    return table


PERCENT_METRICS = ("accuracy_weighted", "f1_positive", "hits_at_k")


def format_cell(mean: float, std: float, delta: float | None = None, scale: float = 1.0) -> str:
    """Render ``mean±std`` with an optional ``(|delta|arrow)`` suffix, three decimals."""
    if math.isnan(mean):
        return "n/a"
    cell = f"{mean * scale:.3f}±{std * scale:.3f}"
    if delta is not None and not math.isnan(delta):
        arrow = "↑" if delta > 0 else "↓" if delta < 0 else ""
        cell += f" ({abs(delta) * scale:.3f}{arrow})"
    return cell


def render_markdown(tables: Sequence[ComparisonTable]) -> str:
    lines = ["| Method | L | Metric | w/o CLFE | + CLFE |", "|---|---|---|---|---|"]
    for t in tables:
        for r in t.rows:
            scale = 100.0 if r.metric in PERCENT_METRICS else 1.0
            has_both = not (math.isnan(r.baseline_mean) or math.isnan(r.clfe_mean))
            base = format_cell(r.baseline_mean, r.baseline_std, scale=scale)
            with_clfe = format_cell(r.clfe_mean, r.clfe_std, r.delta if has_both else None, scale)
            notes = []
            for arm in ARMS:
                failed = getattr(r, f"{arm}_failed")
                if failed:
                    notes.append(f"{arm} failed seeds {failed}")
            name = r.backbone + (f" ({'; '.join(notes)})" if notes else "")
            lines.append(f"| {name} | {r.layers} | {r.metric} | {base} | {with_clfe} |")
    return "\n".join(lines) + "\n"


def emit_report(tables: Sequence[ComparisonTable], out_dir: str | Path,
                configs: Sequence[ExperimentConfig] = ()) -> dict[str, Path]:
    if not tables or all(not t.rows for t in tables):
        raise ValueError("emit_report needs at least one non-empty table")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    merged = ComparisonTable([r for t in tables for r in t.rows])
    paths = {"csv": out / "results.csv", "markdown": out / "results.md", "manifest": out / "manifest.json"}
    write_csv(merged, paths["csv"])
    paths["markdown"].write_text(render_markdown(tables), encoding="utf-8")
    manifest = {
        "tool": "clfe",
        "version": __version__,
        "seeds": sorted({s for c in configs for s in c.seeds}) if configs else [],
        "configs": [c.render() for c in configs],
        "complete": all(t.complete for t in tables),
    }
    paths["manifest"].write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return paths


# ---------------------------------------------------------------------------
# entry point


def _cmd_run(args) -> int:
    overrides = {}
    if args.out:
        overrides["out"] = args.out
    if args.seeds:
        overrides["seeds"] = args.seeds
    if args.arms:
        overrides["arms"] = args.arms
    cfg = parse_config(args.config, overrides)
    out = Path(cfg.out)
    table = run_ab(cfg, log_dir=out / "logs")
    emit_report([table], out, [cfg])
    print(render_markdown([table]), end="")
    return 0 if table.complete else 1


def _cmd_gen(args) -> int:
    if args.kind == "sbm":
        blocks = [int(x) for x in args.blocks.split(",")]
        graphs = [gen_sbm(blocks, args.p_intra, args.p_inter, args.noise, args.seed + i) for i in range(args.count)]
    elif args.kind == "tsp":
        graphs = [gen_tsp(args.nodes, args.k, args.seed + i, exact=not args.approx) for i in range(args.count)]
    elif args.kind == "reg":
        graphs = gen_regression(args.count, (args.min_size, args.max_size), args.seed)
    else:
        graphs = gen_graph_classes(args.count, (args.min_size, args.max_size), args.seed)
    save_graphs(graphs, args.out)
    print(f"wrote {len(graphs)} graphs to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    worst = 0.0
    for clfe in (False, True):
        rep = layer_gradient_suite(args.backbone, clfe, seed=args.seed)
        worst = max(worst, rep.max_rel_error)
        status = "ok" if rep.passed else "FAIL"
        print(f"{args.backbone} clfe={'on' if clfe else 'off'}: max rel error {rep.max_rel_error:.3e} "
              f"over {rep.checked} coordinates ({rep.skipped} non-smooth skipped) [{status}]")
    print(f"max relative error: {worst:.3e}")
    return 0 if worst <= 1e-4 else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clfe", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train baseline and CLFE arms and write comparison tables")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--seeds", help="comma-separated, default 9,23,41,42")
    r.add_argument("--arms", help="comma-separated subset of baseline,clfe")
    r.set_defaults(func=_cmd_run)

    g = sub.add_parser("gen", help="write generated graphs as line-delimited records")
    g.add_argument("--kind", choices=("sbm", "tsp", "reg", "graphcls"), required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--blocks", default="15,15,15,15")
    g.add_argument("--p-intra", type=float, default=0.3)
    g.add_argument("--p-inter", type=float, default=0.05)
    g.add_argument("--noise", type=float, default=0.3)
    g.add_argument("--nodes", type=int, default=10)
    g.add_argument("--k", type=int, default=4)
    g.add_argument("--approx", action="store_true", help="2-opt labels instead of exact Held-Karp")
    g.add_argument("--min-size", type=int, default=8)
    g.add_argument("--max-size", type=int, default=16)
    g.set_defaults(func=_cmd_gen)

    c = sub.add_parser("gradcheck", help="finite-difference check of every layer parameter")
    c.add_argument("--backbone", choices=BACKBONES, required=True)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=_cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigParseError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
