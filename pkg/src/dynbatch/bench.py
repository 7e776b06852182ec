"""Tree benchmark: manual batching vs dynamic batching.

Three modes evaluate a batch of binary trees with the benchmark tree model
(leaf state lookup + Tree-LSTM cell):

* ``manual``: every tree has the same shape; a plan specialised to that shape
  calls each kernel once per tree node over the whole batch, with no gather or
  concat.
* ``dynamic``: the same same-shape trees through the scheduler.
* ``full-dynamic``: every tree has its own random shape.

The ``train`` phase adds the backward pass and one Adam step on the loss
``mean over trees of sum(h_root)``.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import gen_random_tree
from .models import BenchTreeModel, build_bench_tree
from .runtime import ExecutionStats, ParameterStore, adam_step, run_backward, run_forward

MODES = ("manual", "dynamic", "full-dynamic")
PHASES = ("infer", "train")
COLUMNS = ("mode", "phase", "batch_size", "tree_size", "state_size",
           "batch_time_s", "tree_time_s", "cost_ratio", "speedup_ratio")


class ConfigError(ValueError):
    pass


def _canonical_mode(mode: str) -> str:
    mode = mode.replace("_", "-")
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    return mode


@dataclass(frozen=True)
class BenchConfig:
    batch_size: int = 64
    tree_size: int = 128
    state_size: int = 64
    mode: str = "full-dynamic"
    phase: str = "infer"
    repeats: int = 5
    seed: int = 0
    out: str | None = None
    # None: fixed for manual/dynamic, random for full-dynamic
    shape_mode: str | None = None
    vocab_size: int = 64
    threads: int = 1
    include_compile: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "mode", _canonical_mode(self.mode))
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.tree_size < 1:
            raise ConfigError("tree_size must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.repeats < 3:
            raise ConfigError("repeats must be at least 3 (medians are reported)")
        if self.shapes == "random" and self.mode == "manual":
            raise ConfigError("manual batching cannot batch trees of different shapes")

    @property
    def shapes(self) -> str:
        if self.shape_mode is not None:
            return self.shape_mode
        return "random" if self.mode == "full-dynamic" else "fixed"


@dataclass
class BenchRow:
    mode: str
    phase: str
    batch_size: int
    tree_size: int
    state_size: int
    batch_time_s: float
    tree_time_s: float
    cost_ratio: float | None = None
    speedup_ratio: float | None = None
    kernel_calls: int = 0

    def as_csv(self) -> dict:
        def fmt(x):
            return "" if x is None else (f"{x:.6g}" if isinstance(x, float) else str(x))

        return {c: fmt(getattr(self, c)) for c in COLUMNS}


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)

    def find(self, mode: str, phase: str, batch_size: int) -> BenchRow | None:
        mode = _canonical_mode(mode)
        for r in self.rows:
            if (r.mode, r.phase, r.batch_size) == (mode, phase, batch_size):
                return r
        return None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow(r.as_csv())

    def to_text(self) -> str:
        lines = [" ".join(f"{c:>13}" for c in COLUMNS)]
        for r in self.rows:
            lines.append(" ".join(f"{v:>13}" for v in r.as_csv().values()))
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Workloads


def make_trees(cfg: BenchConfig) -> list:
    """``batch_size`` trees. Fixed mode repeats one shape; tokens differ."""
    rng = np.random.default_rng(cfg.seed)
    return [gen_random_tree(cfg.tree_size, cfg.shapes, rng, cfg.vocab_size)
            for _ in range(cfg.batch_size)]


def make_model(cfg: BenchConfig) -> tuple[BenchTreeModel, "Compiler", ParameterStore]:  # noqa: F821
    from .dyn_batch import Compiler

    model = build_bench_tree(cfg.state_size, cfg.vocab_size, cfg.dtype)
    compiler = Compiler(model.block)
    return model, compiler, compiler.init_params(cfg.seed)


class ManualPlan:
    """Static plan for one tree shape: a post-order list of nodes, each run as
    one kernel call over the whole batch."""

    def __init__(self, model: BenchTreeModel, shape_tree):
        self.model = model
        self.steps: list[tuple] = []  # ("leaf", leaf_no) or ("cell", left, right)
        self.n_leaves = 0
        self._root = self._walk(shape_tree)

    def _walk(self, t) -> int:
        # iterative post-order so deep trees are fine; returns the root step
        stack, done = [(t, False)], []
        while stack:
            node, expanded = stack.pop()
            if not isinstance(node, tuple):
                self.steps.append(("leaf", self.n_leaves))
                self.n_leaves += 1
                done.append(len(self.steps) - 1)
            elif expanded:
                right, left = done.pop(), done.pop()
                self.steps.append(("cell", left, right))
                done.append(len(self.steps) - 1)
            else:
                stack += [(node, True), (node[1], False), (node[0], False)]
        return done.pop()

    @staticmethod
    def tokens(trees) -> np.ndarray:
        """``[batch, leaves]`` token matrix in left-to-right leaf order."""
        rows = []
        for t in trees:
            row, stack = [], [t]
            while stack:
                n = stack.pop()
                if isinstance(n, tuple):
                    stack.append(n[1])
                    stack.append(n[0])
                else:
                    row.append(n)
            rows.append(row)
        return np.asarray(rows, dtype=np.int32)

    def forward(self, params, tokens: np.ndarray, stats: ExecutionStats | None = None,
                keep: bool = False):
        emb, cell = self.model.embedding, self.model.cell
        values: list = [None] * len(self.steps)
        caches: list = [None] * len(self.steps) if keep else None
        for k, step in enumerate(self.steps):
            if step[0] == "leaf":
                outs, cache = emb.forward(params, [tokens[:, step[1]]])
                name = emb.name
            else:
                (hl, cl), (hr, cr) = values[step[1]], values[step[2]]
                outs, cache = cell.forward(params, [hl, cl, hr, cr])
                name = cell.name
            values[k] = (outs[0], outs[1])
            if keep:
                caches[k] = cache
            if stats is not None:
                stats.calls[name] += 1
        return values[self._root], caches

    def backward(self, params, caches, root_grads) -> dict:
        emb, cell = self.model.embedding, self.model.cell
        grads = {name: np.zeros_like(p) for name, p in params.items()}
        state_grads: list = [None] * len(self.steps)
        state_grads[self._root] = list(root_grads)
        for k in range(len(self.steps) - 1, -1, -1):
            g = state_grads[k]
            if g is None:
                continue
            step = self.steps[k]
            op = emb if step[0] == "leaf" else cell
            in_grads, pgrads = op.backward(params, caches[k], g)
            for name, pg in pgrads.items():
                grads[name] += pg
            if step[0] == "cell":
                state_grads[step[1]] = in_grads[0:2]
                state_grads[step[2]] = in_grads[2:4]
        return grads


def run_manual_baseline(model: BenchTreeModel, trees: list, params, stats=None):
    """Evaluate same-shape trees with the shape-specialised plan. Returns the
    per-tree root ``(h, c)``."""
    from .data import tree_shape

    shape = tree_shape(trees[0])
    if any(tree_shape(t) != shape for t in trees[1:]):
        raise ConfigError("manual batching needs every tree in the batch to share one shape")
    plan = ManualPlan(model, trees[0])
    (h, c), _ = plan.forward(params, ManualPlan.tokens(trees), stats)
    return [(h[i], c[i]) for i in range(len(trees))]


# ---------------------------------------------------------------------------
# Timing


def _root_grads(batch: int, state: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    gh = np.full((batch, state), 1.0 / batch, dtype=dtype)
    return gh, np.zeros_like(gh)


def _workload(cfg: BenchConfig):
    """The timed callable for one configuration and its kernel-call count."""
    model, compiler, params0 = make_model(cfg)
    trees = make_trees(cfg)
    b, s = cfg.batch_size, cfg.state_size
    stats = ExecutionStats()

    if cfg.mode == "manual":
        plan = ManualPlan(model, trees[0])
        tokens = ManualPlan.tokens(trees)

        def infer():
            plan.forward(params0, tokens)

        def train():
            params = params0.copy()
            (h, _c), caches = plan.forward(params, tokens, keep=True)
            grads = plan.backward(params, caches, _root_grads(b, s, h.dtype))
            adam_step(params, grads, lr=1e-3)

        plan.forward(params0, tokens, stats)
    else:
        schedule = compiler.compile_batch(trees)

        def get_schedule():
            return compiler.compile_batch(trees) if cfg.include_compile else schedule

        def infer():
            run_forward(get_schedule(), params0, threads=cfg.threads)

        def train():
            params = params0.copy()
            sch = get_schedule()
            _, tape = run_forward(sch, params, "train", threads=cfg.threads)
            gh, gc = _root_grads(b, s, np.dtype(cfg.dtype))
            seeds = list(zip(gh, gc))
            grads = run_backward(tape, sch, params, seeds)
            adam_step(params, grads, lr=1e-3)

        run_forward(schedule, params0, stats=stats)
    return (infer if cfg.phase == "infer" else train), stats.total


def _row(cfg: BenchConfig, t: float, calls: int) -> BenchRow:
    b = cfg.batch_size
    return BenchRow(cfg.mode, cfg.phase, b, cfg.tree_size, cfg.state_size, t, t / b,
                    kernel_calls=calls)


def measure(cfg: BenchConfig) -> BenchRow:
    """Median wall time of one batch for a single configuration."""
    return measure_interleaved([cfg])[0]


def measure_interleaved(configs: list[BenchConfig]) -> list[BenchRow]:
    """Median wall time per configuration, timing them round-robin.

    Each configuration is warmed up once; then every round runs each one
    once. Slow drifts in machine load hit all configurations alike, which
    keeps the ratio columns stable. Rounds = the largest ``repeats``.
    """
    work = [_workload(c) for c in configs]
    for fn, _ in work:
        fn()
    times: list[list[float]] = [[] for _ in configs]
    for _ in range(max(c.repeats for c in configs)):
        for k, (fn, _) in enumerate(work):
            if len(times[k]) >= configs[k].repeats:
                continue
            t0 = time.perf_counter()
            fn()
            times[k].append(time.perf_counter() - t0)
    return [_row(c, statistics.median(t), calls) for c, t, (_, calls) in zip(configs, times, work)]


def run_benchmark(configs, write: bool = True) -> BenchReport:
    """Measure each configuration plus the references its ratio columns need.

    cost ratio: dynamic per-tree time / manual per-tree time, same batch
    size. speedup ratio: manual per-tree time at batch 1 / full-dynamic
    per-tree time. Both are filled on every row of a batch size whose inputs
    were measured. All configurations are timed round-robin
    (:func:`measure_interleaved`).
    """
    if isinstance(configs, BenchConfig):
        configs = [configs]
    wanted: list[BenchConfig] = []

    def want(c):
        key = (c.mode, c.phase, c.batch_size)
        if all((w.mode, w.phase, w.batch_size) != key for w in wanted):
            wanted.append(c)

    for c in configs:
        want(c)
    for c in configs:
        if c.mode == "dynamic":
            want(replace(c, mode="manual", shape_mode=None))
        if c.mode == "full-dynamic":
            want(replace(c, mode="manual", batch_size=1, shape_mode=None))
    report = BenchReport(measure_interleaved(wanted))
    fill_ratios(report)
    report.rows.sort(key=lambda r: (r.phase, -r.batch_size, MODES.index(r.mode)))
    out = configs[0].out
    if write and out:
        report.write_csv(out)
    return report


def fill_ratios(report: BenchReport) -> None:
    for r in report.rows:
        manual = report.find("manual", r.phase, r.batch_size)
        dynamic = report.find("dynamic", r.phase, r.batch_size)
        full = report.find("full-dynamic", r.phase, r.batch_size)
        manual1 = report.find("manual", r.phase, 1)
        r.cost_ratio = dynamic.tree_time_s / manual.tree_time_s if manual and dynamic else None
        r.speedup_ratio = manual1.tree_time_s / full.tree_time_s if manual1 and full else None


# ---------------------------------------------------------------------------
# Report checking


def check_report(path) -> list[BenchRow]:
    """Parse a benchmark CSV and check its schema and ratio columns.

    Raises ``ValueError`` describing the first problem found.
    """
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise ValueError(f"columns {reader.fieldnames} != {list(COLUMNS)}")
        rows = []
        for n, rec in enumerate(reader, 2):
            try:
                row = BenchRow(
                    mode=_canonical_mode(rec["mode"]),
                    phase=rec["phase"],
                    batch_size=int(rec["batch_size"]),
                    tree_size=int(rec["tree_size"]),
                    state_size=int(rec["state_size"]),
                    batch_time_s=float(rec["batch_time_s"]),
                    tree_time_s=float(rec["tree_time_s"]),
                    cost_ratio=float(rec["cost_ratio"]) if rec["cost_ratio"] else None,
                    speedup_ratio=float(rec["speedup_ratio"]) if rec["speedup_ratio"] else None,
                )
            except (ValueError, ConfigError) as e:
                raise ValueError(f"{path}:{n}: {e}") from None
            if row.phase not in PHASES:
                raise ValueError(f"{path}:{n}: unknown phase {row.phase!r}")
            if row.batch_time_s <= 0 or not np.isclose(row.tree_time_s * row.batch_size,
                                                       row.batch_time_s, rtol=1e-4):
                raise ValueError(f"{path}:{n}: tree time does not match batch time / batch size")
            rows.append(row)
    report = BenchReport(rows)
    expected = BenchReport([replace(r) for r in rows])
    fill_ratios(expected)
    for n, (got, exp) in enumerate(zip(rows, expected.rows), 2):
        for col in ("cost_ratio", "speedup_ratio"):
            a, b = getattr(got, col), getattr(exp, col)
            if (a is None) != (b is None) or (a is not None and not np.isclose(a, b, rtol=1e-4)):
                raise ValueError(f"{path}:{n}: {col} is {a}, expected {b}")
    return report.rows
