"""Invocation graphs: the DAG of constants and operation calls that tracing
produces and the scheduler consumes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .operations import Operation
from .type_system import TensorType


class Ref:
    """Output ``slot`` of graph node ``node``, carrying its tensor type.

    Deliberately not a tuple: traced tuple values are plain Python tuples.
    """

    __slots__ = ("node", "slot", "ttype")

    def __init__(self, node: int, slot: int, ttype: TensorType):
        self.node = node
        self.slot = slot
        self.ttype = ttype

    def __eq__(self, other):
        return (
            isinstance(other, Ref)
            and self.node == other.node
            and self.slot == other.slot
            and self.ttype == other.ttype
        )

    def __hash__(self):
        return hash((self.node, self.slot, self.ttype))

    def __repr__(self):
        return f"Ref({self.node}, {self.slot}, {self.ttype})"

    def shifted(self, offset: int) -> "Ref":
        return Ref(self.node + offset, self.slot, self.ttype)


@dataclass
class Constant:
    value: np.ndarray
    ttype: TensorType

    @property
    def inputs(self) -> tuple:
        return ()

    @property
    def out_types(self) -> tuple[TensorType, ...]:
        return (self.ttype,)


@dataclass
class Invocation:
    op: Operation
    inputs: tuple[Ref, ...]
    out_types: tuple[TensorType, ...]


@dataclass
class PassThroughNode:
    ttype: TensorType
    source: Ref

    @property
    def inputs(self) -> tuple[Ref, ...]:
        return (self.source,)

    @property
    def out_types(self) -> tuple[TensorType, ...]:
        return (self.ttype,)


def map_refs(value, fn):
    """Apply ``fn`` to every Ref inside a traced result structure."""
    if isinstance(value, Ref):
        return fn(value)
    if isinstance(value, tuple):
        return tuple(map_refs(v, fn) for v in value)
    if isinstance(value, list):
        return [map_refs(v, fn) for v in value]
    return value


def iter_refs(value):
    if isinstance(value, Ref):
        yield value
    elif isinstance(value, (tuple, list)):
        for v in value:
            yield from iter_refs(v)


class InvocationGraph:
    """Nodes in creation order plus one traced result per host input.

    Creation order is a topological order: a node is only ever added after
    everything it reads.
    """

    def __init__(self):
        self.nodes: list = []
        self.results: list = []

    def __len__(self) -> int:
        return len(self.nodes)

    def add_constant(self, value: np.ndarray, ttype: TensorType) -> Ref:
        self.nodes.append(Constant(value, ttype))
        return Ref(len(self.nodes) - 1, 0, ttype)

    def add_invocation(self, op: Operation, inputs, out_types) -> list[Ref]:
        n = len(self.nodes)
        for ref in inputs:
            if not 0 <= ref.node < n:
                raise ValueError(f"invocation of {op.name!r} reads unknown node {ref.node}")
        self.nodes.append(Invocation(op, tuple(inputs), tuple(out_types)))
        return [Ref(n, i, t) for i, t in enumerate(out_types)]

    def add_pass_through(self, source: Ref) -> Ref:
        self.nodes.append(PassThroughNode(source.ttype, source))
        return Ref(len(self.nodes) - 1, 0, source.ttype)

    def invocation_count(self) -> int:
        return sum(isinstance(n, Invocation) for n in self.nodes)
