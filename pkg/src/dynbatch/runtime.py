"""Executing schedules.

The forward pass follows the schedule's depths: each operation group
gathers its inputs, runs once, and writes its outputs. Per-depth states are
not materialised; rows live in one arena per tensor type, with pass-through
rows resolved to the row they forward. The backward pass walks the depths in
reverse: read each group's output gradient rows, run the kernel adjoint, and
scatter-add into the rows it gathered from.
"""

from __future__ import annotations

import struct
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .dyn_batch import EdgeLabel
from .graph import Constant, InvocationGraph, PassThroughNode, map_refs
from .operations import ParamSpec, PassThrough

# -- parameters ------------------------------------------------------------------


class ParameterStore(dict):
    """Named parameter tensors plus optimizer slots.

    Operations read parameters by name, so every invocation of one operation
    shares the same weights.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.slots: dict[str, dict[str, np.ndarray]] = {}
        self.step = 0

    @classmethod
    def from_specs(cls, specs: list[ParamSpec], seed: int = 0) -> "ParameterStore":
        rng = np.random.default_rng(seed)
        store = cls()
        for spec in specs:
            store[spec.name] = _initial_value(spec, rng)
        return store

    def copy(self) -> "ParameterStore":
        out = ParameterStore({k: v.copy() for k, v in self.items()})
        out.slots = {k: {s: a.copy() for s, a in v.items()} for k, v in self.slots.items()}
        out.step = self.step
        return out


def _initial_value(spec: ParamSpec, rng: np.random.Generator) -> np.ndarray:
    dtype = np.dtype(spec.dtype)
    if isinstance(spec.init, np.ndarray):
        if spec.init.shape != spec.shape:
            raise ValueError(f"{spec.name}: initializer shape {spec.init.shape} != {spec.shape}")
        return spec.init.astype(dtype, copy=True)
    if spec.init == "zeros":
        return np.zeros(spec.shape, dtype=dtype)
    if spec.init == "glorot":
        fan_in, fan_out = spec.fans or (spec.shape[0], spec.shape[-1])
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=spec.shape).astype(dtype)
    if spec.init == "normal":
        return (0.1 * rng.standard_normal(spec.shape)).astype(dtype)
    raise ValueError(f"{spec.name}: unknown initializer {spec.init!r}")


# -- execution -------------------------------------------------------------------


class ExecutionError(Exception):
    pass


@dataclass
class Tape:
    """Per depth, per kernel group: the cache saved for the backward sweep,
    plus the arenas the forward pass filled."""

    caches: list[list] = field(default_factory=list)
    arena: dict = field(default_factory=dict)

    @property
    def depth_count(self) -> int:
        return len(self.caches)


@dataclass
class ExecutionStats:
    """Kernel-call counts by operation name."""

    calls: Counter = field(default_factory=Counter)

    def __getitem__(self, name):
        return self.calls[name]

    @property
    def total(self) -> int:
        return sum(self.calls.values())


def _context(g) -> str:
    return f"depth {g.depth}, op {g.name}"


# -- execution plan ----------------------------------------------------------------
#
# Rather than materialising every depth's state, each tensor type gets one
# arena holding the rows that constants and kernels actually produce. A
# pass-through row is an alias of its source row, so chains of pass-throughs
# resolve to a single arena row and cost nothing at run time. Gather indices
# into depth-(d-1) state are translated to arena rows once per schedule.


@dataclass
class _Step:
    group: object
    index: tuple  # arena rows per input
    unique: tuple
    bounds: tuple
    writes: tuple  # (type, slots, arena start, rows)


@dataclass
class _Plan:
    sizes: dict
    loc: list  # loc[d][t]: arena row of each depth-d state row
    steps: list  # steps[d - 1]: kernel groups at depth d

    def row(self, label: EdgeLabel) -> int:
        return int(self.loc[label.depth][label.ttype][label.index])


def _plan(schedule) -> _Plan:
    plan = schedule.__dict__.get("_arena_plan")
    if plan is not None:
        return plan
    sizes: dict = {}
    loc = [{}]
    for t, rows in schedule.constants:
        loc[0][t] = np.arange(len(rows), dtype=np.intp)
        sizes[t] = len(rows)
    steps = []
    for d, level in enumerate(schedule.levels, 1):
        prev = loc[-1]
        here = {t: np.empty(n, dtype=np.intp) for t, n in schedule.extents[d]}
        level_steps = []
        for g in level:
            if isinstance(g.op, PassThrough):
                t, _, start, rows = g.writes[0]
                here[t][start:start + rows] = prev[t][g.index[0]]
                continue
            writes = []
            for t, slots, start, rows in g.writes:
                base = sizes.get(t, 0)
                here[t][start:start + rows] = np.arange(base, base + rows)
                writes.append((t, slots, base, rows))
                sizes[t] = base + rows
            index = tuple(prev[t][i] for t, i in zip(g.in_types, g.index))
            level_steps.append(_Step(
                g, index,
                tuple(len(np.unique(i)) == len(i) for i in index),
                tuple((int(i.min()), int(i.max())) if i.size else (0, -1) for i in index),
                tuple(writes)))
        loc.append(here)
        steps.append(level_steps)
    plan = _Plan(sizes, loc, steps)
    object.__setattr__(schedule, "_arena_plan", plan)
    return plan


def _run_group(step, arena, params, validate, lo: int = 0, hi: int | None = None):
    g = step.group
    hi = g.count if hi is None else hi
    try:
        inputs = [tc.take_rows(arena[t], idx[lo:hi], bounds=b)
                  for t, idx, b in zip(g.in_types, step.index, step.bounds)]
        outs, cache = g.op.forward(params, inputs)
    except tc.KernelError as e:
        raise e.with_context(_context(g))
    except KeyError as e:
        raise ExecutionError(f"missing state or parameter {e} [{_context(g)}]") from None
    if validate:
        for k, (o, t) in enumerate(zip(outs, g.out_types)):
            if o.shape != (hi - lo,) + t.shape or o.dtype != np.dtype(t.dtype):
                raise tc.KernelTypeError(f"output {k} has {o.dtype}{list(o.shape)}, expected {t}",
                                         _context(g))
            if o.dtype.kind == "f" and not np.all(np.isfinite(o)):
                raise tc.KernelError(f"output {k} is not finite", _context(g))
    return outs, cache


def _store(step, outs, arena, lo: int = 0, hi: int | None = None) -> None:
    """Write a group's outputs (instances ``lo:hi``) into its arena rows;
    several outputs of one type interleave instance-major."""
    g = step.group
    hi = g.count if hi is None else hi
    for t, slots, start, rows in step.writes:
        k = len(slots)
        dest = arena[t][start + lo * k:start + hi * k]
        if k == 1:
            dest[...] = outs[slots[0]]
        else:
            dest = dest.reshape((hi - lo, k) + t.shape)
            for j, s in enumerate(slots):
                dest[:, j] = outs[s]


# Inference runs very large groups in row blocks so the temporaries of one
# kernel call stay cache-sized. Instances are independent, so this only
# changes the order of work.
BLOCK_ROWS = 128


def _run_blocked(step, arena, params, validate) -> None:
    g = step.group
    for lo in range(0, g.count, BLOCK_ROWS):
        hi = min(lo + BLOCK_ROWS, g.count)
        outs, _ = _run_group(step, arena, params, validate, lo, hi)
        _store(step, outs, arena, lo, hi)


def run_forward(schedule, params, mode: str = "infer", stats: ExecutionStats | None = None,
                validate: bool = False, threads: int = 1):
    """Evaluate a schedule.

    Returns ``(results, tape)`` where ``results`` mirrors the traced result
    structure of each batch element with numpy arrays (batch axis removed).
    ``tape`` is ``None`` unless ``mode == "train"``.

    Depth by depth, each kernel group gathers its inputs and writes its
    outputs into preallocated arena rows. Pass-through groups are resolved
    to aliases when the plan is built; they still appear in ``stats``.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    plan = _plan(schedule)
    arena = {t: np.empty((n,) + t.shape, dtype=t.dtype) for t, n in plan.sizes.items()}
    for t, rows in schedule.constants:
        arena[t][:len(rows)] = rows
    tape = Tape() if mode == "train" else None
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for level, steps in zip(schedule.levels, plan.steps):
            if tape is None and pool is None:
                for s in steps:
                    if s.group.count > BLOCK_ROWS:
                        _run_blocked(s, arena, params, validate)
                    else:
                        _store(s, _run_group(s, arena, params, validate)[0], arena)
            elif pool is not None and len(steps) > 1:
                # groups within a depth read earlier rows and write disjoint ones
                done = list(pool.map(lambda s: _run_group(s, arena, params, validate), steps))
            else:
                done = [_run_group(s, arena, params, validate) for s in steps]
            if tape is not None or pool is not None:
                for s, (outs, _) in zip(steps, done):
                    _store(s, outs, arena)
            if stats is not None:
                for g in level:
                    stats.calls[g.name] += 1
            if tape is not None:
                tape.caches.append([c for _, c in done])
    finally:
        if pool is not None:
            pool.shutdown()
    if tape is not None:
        tape.arena = arena
    results = _read_results(schedule.results, plan, arena)
    return results, tape


def _read_results(structure, plan, arena):
    def read(v):
        if isinstance(v, EdgeLabel):
            return arena[v.ttype][plan.row(v)]
        if isinstance(v, tuple):
            return tuple(read(x) for x in v)
        if isinstance(v, list):
            return [read(x) for x in v]
        return v

    return [read(r) for r in structure]


def run_backward(tape: Tape, schedule, params, result_grads) -> dict[str, np.ndarray]:
    """Parameter gradients given gradients for every result.

    ``result_grads`` mirrors the structure returned by :func:`run_forward`;
    ``None`` entries contribute nothing. Parameters no operation touched get
    zero gradients.
    """
    if tape is None or tape.depth_count != schedule.max_depth:
        raise ExecutionError("backward needs the tape of a train-mode forward over this schedule")
    plan = _plan(schedule)
    grads: dict = {}

    def arena_grad(t):
        g = grads.get(t)
        if g is None:
            g = grads[t] = np.zeros_like(tape.arena[t])
        return g

    def seed(label, value):
        if value is None:
            return
        if isinstance(label, EdgeLabel):
            arena_grad(label.ttype)[plan.row(label)] += value
        elif isinstance(label, (tuple, list)):
            for lab, v in zip(label, value):
                seed(lab, v)

    for label, value in zip(schedule.results, result_grads):
        seed(label, value)

    param_grads = {name: np.zeros_like(p) for name, p in params.items()}
    # every consumer of a row sits at a greater depth, so its gradient is
    # complete by the time the producing depth is reached
    for d in range(schedule.max_depth, 0, -1):
        for s, cache in zip(plan.steps[d - 1], tape.caches[d - 1]):
            g = s.group
            if not any(t in grads for t, *_ in s.writes):
                continue
            out_grads = [None] * len(g.out_types)
            for t, slots, start, rows in s.writes:
                gt = grads.get(t)
                part = (np.zeros((rows,) + t.shape, dtype=t.dtype) if gt is None
                        else gt[start:start + rows])
                if len(slots) == 1:
                    out_grads[slots[0]] = part
                else:
                    part = part.reshape((g.count, len(slots)) + t.shape)
                    for j, k in enumerate(slots):
                        out_grads[k] = part[:, j]
            try:
                in_grads, pgrads = g.op.backward(params, cache, out_grads)
            except tc.KernelError as e:
                raise e.with_context(_context(g))
            for name, pg in pgrads.items():
                param_grads[name] += pg
            # adjoint of the gather: scatter-add into the producing rows
            for t, idx, unique, ig in zip(g.in_types, s.index, s.unique, in_grads):
                if ig is None or t.dtype == "int32":
                    continue
                target = arena_grad(t)
                if unique:
                    target[idx] += ig
                else:
                    np.add.at(target, idx, ig)
    return param_grads


def mean_loss(schedule, params, mode: str = "train", stats=None, threads: int = 1):
    """Forward pass for a block whose output is a scalar loss per example.

    Returns ``(mean loss, per-example losses, tape)``.
    """
    results, tape = run_forward(schedule, params, mode, stats=stats, threads=threads)
    losses = np.array([float(np.asarray(r)) for r in results])
    return float(losses.mean()), losses, tape


def loss_and_grads(schedule, params, threads: int = 1):
    """Mean per-example loss and its parameter gradients."""
    loss, losses, tape = mean_loss(schedule, params, "train", threads=threads)
    seeds = [np.asarray(1.0 / len(losses), dtype=lab.ttype.dtype) for lab in schedule.results]
    return loss, run_backward(tape, schedule, params, seeds)


# -- reference evaluator -----------------------------------------------------------


def evaluate_graph(graph: InvocationGraph, params) -> list:
    """Run every invocation on its own, batch size 1, in node order.

    Shares nothing with the scheduler; used as the oracle the batched runtime
    is checked against.
    """
    values: list[list[np.ndarray]] = []
    for node in graph.nodes:
        if isinstance(node, Constant):
            values.append([node.value])
        elif isinstance(node, PassThroughNode):
            values.append([values[node.source.node][node.source.slot]])
        else:
            inputs = [values[r.node][r.slot][None] for r in node.inputs]
            outs, _ = node.op.forward(params, inputs)
            values.append([o[0] for o in outs])
    return [map_refs(r, lambda ref: values[ref.node][ref.slot]) for r in graph.results]


# -- optimizers --------------------------------------------------------------------


def sgd_step(params: ParameterStore, grads: dict, lr: float) -> None:
    for name, g in grads.items():
        params[name] -= np.asarray(lr * g, dtype=params[name].dtype)


def adam_step(params: ParameterStore, grads: dict, lr: float = 0.001, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, t: int | None = None) -> None:
    """One Adam update. ``t`` is the 1-based step; defaults to the store's
    own counter, which is then advanced."""
    if t is None:
        params.step += 1
        t = params.step
    for name, g in grads.items():
        p = params[name]
        slot = params.slots.setdefault(name, {"m": np.zeros_like(p), "v": np.zeros_like(p)})
        slot["m"] = beta1 * slot["m"] + (1 - beta1) * g
        slot["v"] = beta2 * slot["v"] + (1 - beta2) * g * g
        m_hat = slot["m"] / (1 - beta1 ** t)
        v_hat = slot["v"] / (1 - beta2 ** t)
        params[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


# -- checkpoints -------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   magic   b"DBCKPT1\n"
#   u32     manifest length in bytes
#   manifest: UTF-8 text, one line per tensor:
#             "<name>\t<dtype>\t<d0,d1,...>\t<byte offset>\t<byte length>\n"
#   data:   raw little-endian tensor bytes, offsets relative to the data start

_MAGIC = b"DBCKPT1\n"


def save_checkpoint(path, params: dict) -> None:
    lines, blobs, offset = [], [], 0
    for name in sorted(params):
        if "\t" in name or "\n" in name:
            raise ValueError(f"parameter name {name!r} cannot be stored")
        arr = np.asarray(params[name])  # tobytes() is C order; keeps 0-d shapes
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        shape = ",".join(map(str, arr.shape))
        lines.append(f"{name}\t{arr.dtype.name}\t{shape}\t{offset}\t{len(data)}\n")
        blobs.append(data)
        offset += len(data)
    manifest = "".join(lines).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> ParameterStore:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint")
    pos = len(_MAGIC)
    (n,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    manifest = raw[pos:pos + n].decode()
    data = raw[pos + n:]
    store = ParameterStore()
    for line in manifest.splitlines():
        name, dtype, shape, off, length = line.split("\t")
        shape = tuple(int(s) for s in shape.split(",")) if shape else ()
        off, length = int(off), int(length)
        if off + length > len(data):
            raise ValueError(f"{path}: tensor {name!r} runs past the end of the file")
        dt = np.dtype(dtype).newbyteorder("<")
        store[name] = np.frombuffer(data[off:off + length], dtype=dt).reshape(shape).astype(dtype)
    return store


__all__ = [
    "ExecutionError",
    "ExecutionStats",
    "ParameterStore",
    "Tape",
    "adam_step",
    "evaluate_graph",
    "load_checkpoint",
    "loss_and_grads",
    "mean_loss",
    "run_backward",
    "run_forward",
    "save_checkpoint",
    "sgd_step",
]
