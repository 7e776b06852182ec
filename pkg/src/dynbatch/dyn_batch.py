"""Depth-wise batching of invocation graphs.

The scheduler is greedy:

1. every node gets a depth (constants 0, otherwise one more than the deepest
   input);
2. pass-through identities are inserted so each edge spans exactly one level;
3. all invocations of one operation at one depth form a single batched group;
4. outputs at one depth are concatenated per tensor type, groups in
   operation-enumeration order, instances in discovery order;
5. every edge becomes a row index into its (depth, type) concatenation.

The resulting :class:`Schedule` is all the runtime needs to run a whole batch
of differently shaped graphs with one kernel call per (depth, operation).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from .blocks import DEFAULT_MAX_TRACE_DEPTH, Block, Function, Repeat, Tracer, call_with_deep_stack
from .graph import Constant, InvocationGraph, Invocation, PassThroughNode, Ref, iter_refs, map_refs
from .operations import Operation, OperationRegistry, PassThrough
from .type_system import (
    SeqType,
    Signature,
    TensorType,
    TupleType,
    check_schedulable,
    infer_types,
    iter_blocks,
)


class ScheduleError(Exception):
    pass


class EdgeLabel(NamedTuple):
    depth: int
    ttype: TensorType
    index: int

    def __str__(self):
        return f"({self.depth},{self.ttype},{self.index})"


# ---------------------------------------------------------------------------
# Graph rewriting


def merge_graphs(graphs: Iterable[InvocationGraph]) -> InvocationGraph:
    """Disjoint union; node order and per-graph results are preserved."""
    graphs = list(graphs)
    if len(graphs) == 1:
        return graphs[0]
    merged = InvocationGraph()
    for g in graphs:
        offset = len(merged.nodes)
        for node in g.nodes:
            if isinstance(node, Invocation):
                node = Invocation(node.op, tuple(r.shifted(offset) for r in node.inputs), node.out_types)
            elif isinstance(node, PassThroughNode):
                node = PassThroughNode(node.ttype, node.source.shifted(offset))
            merged.nodes.append(node)
        merged.results.extend(map_refs(r, lambda ref: ref.shifted(offset)) for r in g.results)
    return merged


def assign_depths(g: InvocationGraph) -> list[int]:
    """Constants get depth 0; any other node one more than its deepest input."""
    depths: list[int] = []
    for n, node in enumerate(g.nodes):
        inputs = node.inputs
        if any(r.node >= n for r in inputs):
            return _assign_depths_general(g)
        if isinstance(node, Constant):
            depths.append(0)
        else:
            depths.append(1 + max((depths[r.node] for r in inputs), default=0))
    return depths


def _assign_depths_general(g: InvocationGraph) -> list[int]:
    # hand-built graphs may list nodes out of order; detect cycles explicitly
    depths: list[int | None] = [None] * len(g.nodes)
    on_stack = [False] * len(g.nodes)
    for start in range(len(g.nodes)):
        if depths[start] is not None:
            continue
        stack = [(start, 0)]
        on_stack[start] = True
        while stack:
            n, i = stack[-1]
            inputs = g.nodes[n].inputs
            if i < len(inputs):
                stack[-1] = (n, i + 1)
                m = inputs[i].node
                if on_stack[m]:
                    raise ScheduleError(f"cycle in invocation graph through node {m}")
                if depths[m] is None:
                    on_stack[m] = True
                    stack.append((m, 0))
                continue
            stack.pop()
            on_stack[n] = False
            if isinstance(g.nodes[n], Constant):
                depths[n] = 0
            else:
                depths[n] = 1 + max((depths[r.node] for r in inputs), default=0)
    return depths  # type: ignore[return-value]


def insert_pass_throughs(g: InvocationGraph, depths: list[int]) -> tuple[InvocationGraph, list[int]]:
    """Return a graph in which every edge spans exactly one depth level.

    A value needed ``k`` levels later travels through a chain of ``k - 1``
    pass-through nodes. Chains are shared: all consumers of the same value at
    the same depth read the same pass-through row. New nodes are appended in
    creation order.
    """
    out = InvocationGraph()
    out.nodes = list(g.nodes)
    out.results = list(g.results)
    new_depths = list(depths)
    cache: dict[tuple[int, int, int], Ref] = {}

    def at_depth(ref: Ref, d: int) -> Ref:
        if new_depths[ref.node] == d:
            return ref
        key = (ref.node, ref.slot, d)
        hit = cache.get(key)
        if hit is None:
            prev = at_depth(ref, d - 1)
            hit = out.add_pass_through(prev)
            new_depths.append(d)
            cache[key] = hit
        return hit

    for n in range(len(g.nodes)):
        node = g.nodes[n]
        if isinstance(node, Constant):
            continue
        want = depths[n] - 1
        if all(depths[r.node] == want for r in node.inputs):
            continue
        inputs = tuple(r if depths[r.node] == want else at_depth(r, want) for r in node.inputs)
        if isinstance(node, Invocation):
            out.nodes[n] = Invocation(node.op, inputs, node.out_types)
        else:
            out.nodes[n] = PassThroughNode(node.ttype, inputs[0])
    return out, new_depths


# ---------------------------------------------------------------------------
# Schedules


@dataclass(frozen=True)
class OpGroup:
    """All invocations of one operation at one depth."""

    op: Operation
    depth: int
    count: int
    in_types: tuple[TensorType, ...]
    out_types: tuple[TensorType, ...]
    gathers: tuple[tuple[int, ...], ...]  # one row-index list per input
    # where the outputs land in the depth state: (type, slots, start, rows)
    writes: tuple[tuple[TensorType, tuple[int, ...], int, int], ...] = ()
    index: tuple = field(init=False, compare=False, repr=False)
    unique: tuple = field(init=False, compare=False, repr=False)
    bounds: tuple = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        index = tuple(np.asarray(idx, dtype=np.intp) for idx in self.gathers)
        object.__setattr__(self, "index", index)
        object.__setattr__(self, "unique", tuple(len(np.unique(i)) == len(i) for i in index))
        object.__setattr__(self, "bounds", tuple(
            (int(i.min()), int(i.max())) if i.size else (0, -1) for i in index))

    @property
    def name(self) -> str:
        return self.op.name


@dataclass(frozen=True)
class Contribution:
    """Rows group ``group`` adds to one (depth, type) state: its output
    ``slots`` of that type, interleaved instance-major."""

    group: int
    slots: tuple[int, ...]
    start: int
    rows: int


@dataclass(frozen=True)
class Schedule:
    max_depth: int
    # depth-0 state: concatenated constants per tensor type
    constants: tuple[tuple[TensorType, np.ndarray], ...]
    # levels[d - 1] holds the groups run at depth d
    levels: tuple[tuple[OpGroup, ...], ...]
    # layouts[d - 1][t] = ordered contributions forming the depth-d state of type t
    layouts: tuple[tuple[tuple[TensorType, tuple[Contribution, ...]], ...], ...]
    extents: tuple[tuple[tuple[TensorType, int], ...], ...]
    results: tuple
    enumeration: tuple[str, ...]

    def extent(self, depth: int, ttype: TensorType) -> int:
        return dict(self.extents[depth]).get(ttype, 0)

    def groups(self) -> Iterable[OpGroup]:
        for level in self.levels:
            yield from level

    def kernel_calls(self) -> int:
        return sum(len(level) for level in self.levels)

    def dump(self) -> str:
        """Plain-text rendering; stable byte-for-byte for identical inputs."""
        lines = []
        for t, rows in self.constants:
            lines.append(f"d=0 op=<constants> out_rows={rows.shape[0]} type={t}")
        for level in self.levels:
            for g in level:
                ins = " ".join(f"in{k}=[{','.join(map(str, idx))}]" for k, idx in enumerate(g.gathers))
                outs = g.out_types[0] if len(g.out_types) == 1 else "(" + ", ".join(map(str, g.out_types)) + ")"
                lines.append(f"d={g.depth} op={g.name} {ins} out_rows={g.count} type={outs}")
        for label in iter_labels(self.results):
            lines.append(f"result {label}")
        return "\n".join(lines) + "\n"


def iter_labels(value):
    if isinstance(value, EdgeLabel):
        yield value
    elif isinstance(value, (tuple, list)):
        for v in value:
            yield from iter_labels(v)


def _map_labels(value, fn):
    if isinstance(value, Ref):
        return fn(value)
    if isinstance(value, tuple) and not isinstance(value, EdgeLabel):
        return tuple(_map_labels(v, fn) for v in value)
    if isinstance(value, list):
        return [_map_labels(v, fn) for v in value]
    return value


def build_schedule(g: InvocationGraph, depths: list[int],
                   op_enumeration: list[Operation]) -> Schedule:
    """Batch a pass-through-complete graph into a :class:`Schedule`.

    Pass-through groups use the ``PassThrough`` operations found in
    ``op_enumeration``; types without one get a fresh pass-through appended
    after everything else.
    """
    rank = {id(op): k for k, op in enumerate(op_enumeration)}
    pass_ops: dict[TensorType, Operation] = {
        op.ttype: op for op in op_enumeration if isinstance(op, PassThrough)
    }
    extra: list[Operation] = []
    max_depth = max(depths, default=0)

    labels: dict[tuple[int, int], EdgeLabel] = {}
    const_rows: dict[TensorType, list[np.ndarray]] = {}
    by_depth: list[dict[int, list[int]]] = [dict() for _ in range(max_depth + 1)]
    group_op: dict[int, Operation] = {}

    for n, node in enumerate(g.nodes):
        d = depths[n]
        if isinstance(node, Constant):
            if d != 0:
                raise ScheduleError(f"constant node {n} at depth {d}")
            rows = const_rows.setdefault(node.ttype, [])
            labels[(n, 0)] = EdgeLabel(0, node.ttype, len(rows))
            rows.append(node.value)
            continue
        if isinstance(node, PassThroughNode):
            op = pass_ops.get(node.ttype)
            if op is None:
                op = pass_ops[node.ttype] = PassThrough(node.ttype)
                extra.append(op)
        else:
            op = node.op
            if id(op) not in rank:
                raise ScheduleError(f"operation {op.name!r} is not in the operation enumeration")
        group_op[id(op)] = op
        by_depth[d].setdefault(id(op), []).append(n)

    for k, op in enumerate(extra):
        rank[id(op)] = len(op_enumeration) + k

    levels, layouts, extents = [], [], []
    extents.append(tuple((t, len(rows)) for t, rows in const_rows.items()))
    for d in range(1, max_depth + 1):
        keys = sorted(by_depth[d], key=rank.__getitem__)
        counters: dict[TensorType, int] = {}
        layout: dict[TensorType, list[Contribution]] = {}
        level = []
        for gi, key in enumerate(keys):
            op = group_op[key]
            members = by_depth[d][key]
            first = g.nodes[members[0]]
            in_types = tuple(r.ttype for r in first.inputs)
            out_types = tuple(first.out_types)
            slots_by_type: dict[TensorType, list[int]] = {}
            for s, t in enumerate(out_types):
                slots_by_type.setdefault(t, []).append(s)
            for t, slots in slots_by_type.items():
                start = counters.get(t, 0)
                rows = len(members) * len(slots)
                layout.setdefault(t, []).append(Contribution(gi, tuple(slots), start, rows))
                counters[t] = start + rows
            starts = {t: layout[t][-1].start for t in slots_by_type}
            writes = tuple((t, tuple(slots), starts[t], len(members) * len(slots))
                           for t, slots in slots_by_type.items())
            for i, n in enumerate(members):
                for t, slots in slots_by_type.items():
                    base = starts[t] + i * len(slots)
                    for j, s in enumerate(slots):
                        labels[(n, s)] = EdgeLabel(d, t, base + j)
            gathers = []
            for k in range(len(in_types)):
                idx = []
                for n in members:
                    ref = g.nodes[n].inputs[k]
                    lab = labels[(ref.node, ref.slot)]
                    if lab.depth != d - 1:
                        raise ScheduleError(
                            f"edge into node {n} ({op.name}) spans depth {lab.depth} -> {d}; "
                            "insert pass-throughs first")
                    if ref.ttype != in_types[k]:
                        raise ScheduleError(f"{op.name} input {k}: {ref.ttype} vs {in_types[k]}")
                    idx.append(lab.index)
                gathers.append(tuple(idx))
            level.append(OpGroup(op, d, len(members), in_types, out_types, tuple(gathers), writes))
        levels.append(tuple(level))
        layouts.append(tuple((t, tuple(cs)) for t, cs in layout.items()))
        extents.append(tuple(counters.items()))

    results = tuple(_map_labels(r, lambda ref: labels[(ref.node, ref.slot)]) for r in g.results)
    constants = tuple((t, np.stack(rows)) for t, rows in const_rows.items())
    names = tuple(op.name for op in list(op_enumeration) + extra)
    return Schedule(max_depth, constants, tuple(levels), tuple(layouts), tuple(extents), results, names)


def schedule_graph(g: InvocationGraph, op_enumeration: list[Operation]) -> Schedule:
    depths = assign_depths(g)
    g, depths = insert_pass_throughs(g, depths)
    return build_schedule(g, depths, op_enumeration)


# ---------------------------------------------------------------------------
# Compiler


def _tensor_leaves(t, out: list) -> None:
    if isinstance(t, TensorType):
        if t not in out:
            out.append(t)
    elif isinstance(t, TupleType):
        for item in t.items:
            _tensor_leaves(item, out)
    elif isinstance(t, SeqType):
        _tensor_leaves(t.elem, out)


class Compiler:
    """Type-checks a block and sets up dynamic batching for it.

    Holds exactly one binding per operation. ``compile_batch`` traces a list
    of host inputs, merges the graphs and returns the batch :class:`Schedule`.
    """

    def __init__(self, root: Block, registry: OperationRegistry | None = None,
                 max_trace_depth: int = DEFAULT_MAX_TRACE_DEPTH):
        self.root = root
        self.max_trace_depth = max_trace_depth
        blocks = list(iter_blocks(root))
        for b in blocks:
            if isinstance(b, Function) and isinstance(b.op, str) and registry is not None:
                b.op = registry[b.op]
        infer_types(root)
        self.signatures: list[Signature] = check_schedulable(root)
        self.implicit_signatures: list[Signature] = []
        for b in blocks:
            sig = b.implicit_signature()
            if sig is not None and all(sig.op is not s.op for s in self.implicit_signatures):
                self.implicit_signatures.append(sig)
        edge_types: list[TensorType] = []
        for b in blocks:
            _tensor_leaves(b.in_type, edge_types)
            _tensor_leaves(b.out_type, edge_types)
        self.pass_throughs = [PassThrough(t) for t in edge_types]
        self.enumeration: list[Operation] = (
            [s.op for s in self.signatures]
            + [s.op for s in self.implicit_signatures]
            + self.pass_throughs
        )
        self.kernels: dict[str, Operation] = {}
        for op in self.enumeration:
            if op.name in self.kernels:
                raise ScheduleError(f"duplicate operation name {op.name!r}")
            self.kernels[op.name] = op

    @classmethod
    def create(cls, root: Block, **kwargs) -> "Compiler":
        return cls(root, **kwargs)

    @property
    def input_type(self):
        return self.root.in_type

    @property
    def output_type(self):
        return self.root.out_type

    def _signature_of(self, op: Operation) -> Signature:
        for s in self.signatures + self.implicit_signatures:
            if s.op is op:
                return s
        raise KeyError(op.name)

    def param_specs(self):
        specs = []
        for op in self.enumeration:
            if isinstance(op, PassThrough):
                continue
            specs.extend(op.param_specs(self._signature_of(op).inputs))
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ScheduleError("parameter names collide between operations")
        return specs

    def init_params(self, seed: int = 0):
        from .runtime import ParameterStore

        return ParameterStore.from_specs(self.param_specs(), seed)

    def trace_one(self, host_input) -> InvocationGraph:
        tr = Tracer(max_depth=self.max_trace_depth)
        result = tr.trace(self.root, host_input)
        if any(_is_endless(r) for r in _walk_values(result)):
            raise ScheduleError("an endless Broadcast sequence reached the compiled output")
        tr.graph.results.append(result)
        return tr.graph

    def trace(self, inputs: list) -> InvocationGraph:
        """Trace each host input into its own graph and merge them."""
        return call_with_deep_stack(lambda: merge_graphs([self.trace_one(x) for x in inputs]))

    def schedule(self, graph: InvocationGraph) -> Schedule:
        return schedule_graph(graph, self.enumeration)

    def compile_batch(self, inputs: list) -> Schedule:
        return self.schedule(self.trace(inputs))


def compile_block(root: Block, **kwargs) -> Compiler:
    return Compiler(root, **kwargs)


def _walk_values(v):
    yield v
    if isinstance(v, (tuple, list)):
        for item in v:
            yield from _walk_values(item)


def _is_endless(v) -> bool:
    return isinstance(v, Repeat)


__all__ = [
    "Compiler",
    "EdgeLabel",
    "OpGroup",
    "Schedule",
    "ScheduleError",
    "assign_depths",
    "build_schedule",
    "compile_block",
    "insert_pass_throughs",
    "iter_labels",
    "iter_refs",
    "merge_graphs",
    "schedule_graph",
]
