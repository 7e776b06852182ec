"""Blocks: typed, composable descriptions of per-input computations.

A block is a function from an input to an output. Atomic blocks convert host
data to tensors (``Scalar``, ``Tensor``, ``Zeros``), pre-process host data
(``InputTransform``) or apply an operation (``Function``). Combinators plug
simpler blocks together: ``>>``, ``Record``, ``AllOf``, ``OneOf``, ``Map``,
``Fold``, ``Reduce``, ``ZipWith``, ``Broadcast`` and DAG-shaped
``Composition`` scopes. ``ForwardDeclaration`` makes recursive definitions
possible.

Applying a block to a host value (:func:`trace`) does not compute anything.
It records constants and operation invocations into an
:class:`~dynbatch.graph.InvocationGraph`; everything else (dispatch, record
access, sequence plumbing) happens at trace time and leaves no trace.
"""

from __future__ import annotations

import contextlib
import sys
import threading
import warnings
from typing import Any, Callable, Iterable

import numpy as np

from . import operations as ops
from .graph import InvocationGraph, Ref
from .type_system import (
    INPUT,
    VOID,
    BlockType,
    InputType,
    SeqType,
    Signature,
    TensorType,
    TupleType,
    TypeCheckError,
    TypeMismatch,
    VoidType,
    flatten_tensor_types,
    infer_types,
    is_tensor_tuple,
    iter_blocks,
)

DEFAULT_MAX_TRACE_DEPTH = 10000


class TraceError(Exception):
    pass


class CompositionError(TypeCheckError):
    pass


class Block:
    """Base block. ``in_type``/``out_type`` are filled in by type inference."""

    default_in: BlockType | None = None

    def __init__(self, name: str | None = None, input_type: BlockType | None = None,
                 output_type: BlockType | None = None):
        self.name = name
        self.declared_in = input_type
        self.declared_out = output_type
        self.in_type: BlockType | None = None
        self.out_type: BlockType | None = None
        self.path: str | None = None

    # -- structure ---------------------------------------------------------

    def child_items(self) -> Iterable[tuple[str, "Block"]]:
        return ()

    @property
    def children(self) -> list["Block"]:
        return [c for _, c in self.child_items()]

    def describe(self) -> str:
        kind = type(self).__name__
        return f"{kind}({self.name})" if self.name else kind

    def __rshift__(self, other: "Block") -> "Pipe":
        return Pipe(self, other)

    def reads(self, *sources) -> "Block":
        """Wire this block into the enclosing Composition scope."""
        scope = Composition.current()
        if scope is None:
            raise CompositionError(f"{self.describe()}.reads() called outside a Composition scope")
        scope._add_node(self, sources)
        return self

    # -- typing ----------------------------------------------------------------

    def _where(self) -> str:
        return self.path or self.describe()

    def _assign(self, attr: str, t: BlockType | None) -> bool:
        if t is None:
            return False
        cur = getattr(self, attr)
        if cur is None:
            setattr(self, attr, t)
            return True
        if cur != t:
            raise TypeMismatch(self._where(), cur, t, what="input type" if attr == "in_type" else "output type")
        return False

    def _set_in(self, t) -> bool:
        return self._assign("in_type", t)

    def _set_out(self, t) -> bool:
        return self._assign("out_type", t)

    def _check_ready(self) -> None:
        pass

    def _constrain(self) -> bool:
        return False

    def _validate(self) -> None:
        pass

    def signature(self) -> Signature | None:
        return None

    def implicit_signature(self) -> Signature | None:
        return None

    # -- tracing ---------------------------------------------------------------

    def _trace(self, tr: "Tracer", x):
        raise NotImplementedError

    def __repr__(self) -> str:
        return self.describe()


def _same(a: Block, a_attr: str, b: Block, b_attr: str) -> bool:
    """Constrain two type slots to be equal, whichever is known first."""
    changed = a._assign(a_attr, getattr(b, b_attr))
    changed |= b._assign(b_attr, getattr(a, a_attr))
    return changed


# ---------------------------------------------------------------------------
# Atomic blocks


class Scalar(Block):
    """Host scalar -> rank-0 tensor."""

    def __init__(self, dtype: str = "float32", name=None):
        super().__init__(name)
        self.dtype = np.dtype(dtype).name

    def _constrain(self):
        return self._set_in(INPUT) | self._set_out(TensorType(self.dtype, ()))

    def _trace(self, tr, x):
        if not np.isscalar(x) and not (isinstance(x, np.ndarray) and x.ndim == 0):
            raise TraceError(f"{self._where()}: expected a scalar, got {type(x).__name__}")
        return tr.constant(x, self.out_type)


class Tensor(Block):
    """Host array -> tensor of a fixed type."""

    def __init__(self, shape, dtype: str = "float32", name=None):
        super().__init__(name)
        self.ttype = TensorType(np.dtype(dtype).name, tuple(shape))

    def _constrain(self):
        return self._set_in(INPUT) | self._set_out(self.ttype)

    def _trace(self, tr, x):
        return tr.constant(x, self.ttype)


class Zeros(Block):
    """Constant zeros of a tensor (or tuple-of-tensors) type.

    The input is ignored, so any input type is accepted. When ``output_type``
    is omitted the type is taken from context (e.g. the other case of an
    ``Optional``).
    """

    default_in = VOID

    def __init__(self, output_type=None, dtype: str = "float32", name=None):
        if output_type is not None and not isinstance(output_type, (TensorType, TupleType)):
            shape = (output_type,) if isinstance(output_type, int) else tuple(output_type)
            output_type = TensorType(np.dtype(dtype).name, shape)
        super().__init__(name, output_type=output_type)

    def _validate(self):
        if not is_tensor_tuple(self.out_type):
            raise TypeMismatch(self._where(), "tensor or tuple of tensors", self.out_type)

    def _trace(self, tr, x):
        return tr.zeros(self.out_type)


class InputTransform(Block):
    """Apply a host function to the host input."""

    def __init__(self, fn: Callable[[Any], Any], name=None):
        super().__init__(name or getattr(fn, "__name__", None))
        self.fn = fn

    def _constrain(self):
        return self._set_in(INPUT) | self._set_out(INPUT)

    def _trace(self, tr, x):
        return self.fn(x)


class Identity(Block):
    def _constrain(self):
        return _same(self, "in_type", self, "out_type")

    def _trace(self, tr, x):
        return x


class Function(Block):
    """Apply an operation to a tensor or tuple of tensors.

    ``op`` is an :class:`~dynbatch.operations.Operation` or the name of one
    registered with the compiler. The same operation object may be used from
    several Function blocks; it is still one operation (one set of weights,
    one batched kernel call per depth).
    """

    def __init__(self, op: ops.Operation | str, name=None):
        super().__init__(name)
        self.op = op

    def describe(self):
        label = self.op if isinstance(self.op, str) else (self.op.name or self.op.label)
        return f"Function({label})"

    def _check_ready(self):
        if isinstance(self.op, str):
            raise TypeCheckError(f"{self._where()}: operation {self.op!r} is not resolved; "
                                 "pass a registry to the compiler")

    def _constrain(self):
        changed = False
        if self.op.input_type is not None:
            changed |= self._set_in(self.op.input_type)
        if self.in_type is not None and self.out_type is None:
            if not is_tensor_tuple(self.in_type):
                raise TypeMismatch(self._where(), "tensor or tuple of tensors", self.in_type)
            try:
                out = self.op.output_type(self.in_type)
            except TypeError as e:
                raise TypeMismatch(self._where(), "input accepted by the operation", self.in_type) from e
            changed |= self._set_out(out)
        return changed

    def _validate(self):
        for t in (self.in_type, self.out_type):
            if not is_tensor_tuple(t):
                raise TypeMismatch(self._where(), "tensor or tuple of tensors", t)

    def signature(self):
        return Signature(
            self.op.name,
            tuple(flatten_tensor_types(self.in_type)),
            tuple(flatten_tensor_types(self.out_type)),
            self.op,
        )

    def _trace(self, tr, x):
        refs = _flatten_refs(x, self)
        outs = tr.invoke(self.op, refs, flatten_tensor_types(self.out_type))
        return _unflatten(self.out_type, iter(outs))


class Concat(Block):
    """Join a tuple of tensors along the feature axis.

    Realised as an implicit operation; it does not show up in the user
    operation enumeration.
    """

    def __init__(self, name=None):
        super().__init__(name)
        self.op = ops.Concat(name)

    def _constrain(self):
        if self.in_type is not None and self.out_type is None:
            try:
                return self._set_out(self.op.output_type(self.in_type))
            except TypeError as e:
                raise TypeMismatch(self._where(), "tuple of tensors", self.in_type) from e
        return False

    def implicit_signature(self):
        return Signature(self.op.name, tuple(flatten_tensor_types(self.in_type)),
                         (self.out_type,), self.op)

    def _trace(self, tr, x):
        refs = _flatten_refs(x, self)
        return tr.invoke(self.op, refs, [self.out_type])[0]


def _flatten_refs(x, block) -> list[Ref]:
    out = []

    def walk(v):
        if isinstance(v, Ref):
            out.append(v)
        elif isinstance(v, tuple):
            for item in v:
                walk(item)
        else:
            raise TraceError(f"{block._where()}: expected tensors, got {type(v).__name__}")

    walk(x)
    return out


def _unflatten(t: BlockType, it):
    if isinstance(t, TensorType):
        return next(it)
    return tuple(_unflatten(item, it) for item in t.items)


# ---------------------------------------------------------------------------
# Structural combinators


class Pipe(Block):
    """``b1 >> b2``: feed the output of ``b1`` into ``b2``."""

    def __init__(self, first: Block, second: Block, name=None):
        super().__init__(name)
        self.first = first
        self.second = second

    def child_items(self):
        return (("0", self.first), ("1", self.second))

    def _constrain(self):
        changed = _same(self, "in_type", self.first, "in_type")
        changed |= _same(self.first, "out_type", self.second, "in_type")
        changed |= _same(self, "out_type", self.second, "out_type")
        return changed

    def _trace(self, tr, x):
        return tr.trace(self.second, tr.trace(self.first, x))


def pipe(*blocks: Block) -> Block:
    """Left-nested ``b1 >> b2 >> ...``."""
    out = blocks[0]
    for b in blocks[1:]:
        out = Pipe(out, b)
    return out


class Record(Block):
    """Apply each field's block to the matching field of the host input.

    Fields keep their declared order in the output tuple. Integer labels index
    host tuples and lists.
    """

    def __init__(self, fields, name=None):
        super().__init__(name)
        items = list(fields.items()) if isinstance(fields, dict) else list(fields)
        labels = [label for label, _ in items]
        if len(set(labels)) != len(labels):
            raise ValueError(f"Record labels must be distinct: {labels}")
        if not items:
            raise ValueError("Record needs at least one field")
        self.fields = items

    def child_items(self):
        return ((str(label), b) for label, b in self.fields)

    def _constrain(self):
        changed = self._set_in(INPUT)
        for _, b in self.fields:
            changed |= b._set_in(INPUT)
        outs = [b.out_type for _, b in self.fields]
        if all(o is not None for o in outs):
            changed |= self._set_out(TupleType(outs))
        if isinstance(self.out_type, TupleType):
            for (_, b), t in zip(self.fields, self.out_type.items):
                changed |= b._set_out(t)
        return changed

    def _trace(self, tr, x):
        out = []
        for label, b in self.fields:
            try:
                field = x[label]
            except (KeyError, IndexError, TypeError):
                raise TraceError(f"{self._where()}: host input has no field {label!r}") from None
            out.append(tr.trace(b, field))
        return tuple(out)


class AllOf(Block):
    """Pass the same input to every block; return the tuple of results."""

    def __init__(self, *blocks: Block, name=None):
        super().__init__(name)
        if not blocks:
            raise ValueError("AllOf needs at least one block")
        self.blocks = list(blocks)

    def child_items(self):
        return ((str(i), b) for i, b in enumerate(self.blocks))

    def _constrain(self):
        changed = False
        for b in self.blocks:
            changed |= _same(self, "in_type", b, "in_type")
        outs = [b.out_type for b in self.blocks]
        if all(o is not None for o in outs):
            changed |= self._set_out(TupleType(outs))
        return changed

    def _trace(self, tr, x):
        return tuple(tr.trace(b, x) for b in self.blocks)


class OneOf(Block):
    """Dispatch on ``key_fn(input)`` to exactly one case block.

    All cases must produce the same output type.
    """

    default_in = INPUT

    def __init__(self, key_fn: Callable[[Any], Any] | None = None, case_blocks=None, name=None):
        super().__init__(name)
        if case_blocks is None:
            raise ValueError("OneOf needs case blocks")
        if isinstance(case_blocks, dict):
            cases = list(case_blocks.items())
        elif all(isinstance(c, tuple) and len(c) == 2 for c in case_blocks):
            cases = list(case_blocks)
        else:
            cases = list(enumerate(case_blocks))
        if not cases:
            raise ValueError("OneOf needs at least one case")
        self.key_fn = key_fn or (lambda x: x)
        self.cases = dict(cases)

    def child_items(self):
        return ((f"case[{k!r}]", b) for k, b in self.cases.items())

    def _constrain(self):
        changed = False
        for b in self.cases.values():
            changed |= _same(self, "in_type", b, "in_type")
            changed |= _same(self, "out_type", b, "out_type")
        return changed

    def _trace(self, tr, x):
        key = self.key_fn(x)
        try:
            block = self.cases[key]
        except (KeyError, TypeError):
            raise TraceError(f"{self._where()}: no case for key {key!r}") from None
        return tr.trace(block, x)


class Optional(OneOf):
    """``b`` when the input is not None, zeros of ``b``'s output type otherwise."""

    def __init__(self, block: Block, name=None):
        super().__init__(lambda x: x is None, {True: Zeros(), False: block}, name=name)
        self.block = block


class GetItem(Block):
    """Project element ``index`` out of a tuple."""

    def __init__(self, index: int, name=None):
        super().__init__(name)
        self.index = index

    def describe(self):
        return f"GetItem({self.index})"

    def _constrain(self):
        if isinstance(self.in_type, TupleType):
            if not 0 <= self.index < len(self.in_type.items):
                raise TypeMismatch(self._where(), f"tuple with > {self.index} elements", self.in_type)
            return self._set_out(self.in_type.items[self.index])
        if self.in_type is not None:
            raise TypeMismatch(self._where(), "tuple", self.in_type)
        return False

    def _trace(self, tr, x):
        return x[self.index]


# ---------------------------------------------------------------------------
# Sequence combinators


class Repeat:
    """Lazy endless sequence produced by ``Broadcast``."""

    __slots__ = ("value",)

    def __init__(self, value):
        self.value = value

    def __repr__(self):
        return f"Repeat({self.value!r})"


def _as_list(seq, block) -> list:
    if isinstance(seq, Repeat):
        raise TraceError(f"{block._where()}: cannot consume an endless Broadcast sequence here")
    if isinstance(seq, (str, bytes)) or not hasattr(seq, "__iter__"):
        raise TraceError(f"{block._where()}: expected a sequence, got {type(seq).__name__}")
    return list(seq)


class Map(Block):
    """``[f(x1), ..., f(xn)]``."""

    def __init__(self, fn: Block, name=None):
        super().__init__(name)
        self.fn = fn

    def child_items(self):
        return (("f", self.fn),)

    def _constrain(self):
        changed = False
        # a host list (input) maps element-wise over host values
        if isinstance(self.in_type, SeqType):
            changed |= self.fn._set_in(self.in_type.elem)
        elif isinstance(self.in_type, InputType):
            changed |= self.fn._set_in(INPUT)
        elif self.in_type is not None:
            raise TypeMismatch(self._where(), "sequence", self.in_type)
        if isinstance(self.fn.in_type, InputType):
            changed |= self._set_in(INPUT)
        elif self.fn.in_type is not None:
            changed |= self._set_in(SeqType(self.fn.in_type))
        if self.fn.out_type is not None:
            changed |= self._set_out(SeqType(self.fn.out_type))
        if isinstance(self.out_type, SeqType):
            changed |= self.fn._set_out(self.out_type.elem)
        return changed

    def _trace(self, tr, x):
        if isinstance(x, Repeat):
            # every element is the same value, so map it once
            return Repeat(tr.trace(self.fn, x.value))
        return [tr.trace(self.fn, item) for item in _as_list(x, self)]


class Fold(Block):
    """``g(...g(g(z, x1), x2)..., xn)``; ``z`` is traced on a void input.

    ``g`` takes ``(state, element)`` and returns the next state; state and
    element types are independent.
    """

    def __init__(self, fn: Block, initial: Block, name=None):
        super().__init__(name)
        self.fn = fn
        self.initial = initial

    def child_items(self):
        return (("g", self.fn), ("z", self.initial))

    def _constrain(self):
        changed = self.initial._set_in(VOID)
        changed |= _same(self, "out_type", self.initial, "out_type")
        changed |= _same(self, "out_type", self.fn, "out_type")
        if self.in_type is not None and not isinstance(self.in_type, SeqType):
            raise TypeMismatch(self._where(), "sequence", self.in_type)
        state, elem = self.out_type, self.in_type.elem if self.in_type is not None else None
        if state is not None and elem is not None:
            changed |= self.fn._set_in(TupleType((state, elem)))
        g_in = self.fn.in_type
        if g_in is not None:
            if not (isinstance(g_in, TupleType) and len(g_in.items) == 2):
                raise TypeMismatch(self.fn._where(), "(state, element) pair", g_in)
            changed |= self._set_out(g_in.items[0])
            changed |= self._set_in(SeqType(g_in.items[1]))
        return changed

    def _trace(self, tr, x):
        items = _as_list(x, self)
        state = tr.trace(self.initial, None)
        for item in items:
            state = tr.trace(self.fn, (state, item))
        return state


def _element_type(t: BlockType | None, block: Block) -> BlockType | None:
    """Element type of a sequence or of a homogeneous tuple."""
    if t is None:
        return None
    if isinstance(t, SeqType):
        return t.elem
    if isinstance(t, TupleType) and all(i == t.items[0] for i in t.items):
        return t.items[0]
    raise TypeMismatch(block._where(), "sequence or homogeneous tuple", t)


class Reduce(Block):
    """Balanced-tree reduction with a binary block ``g``.

    ``[x1..xn]`` splits into ``[x1..x_{n//2}]`` and the rest, so the
    application depth is ``ceil(log2 n)``. Homogeneous tuples are accepted as
    sequences.
    """

    def __init__(self, fn: Block, name=None):
        super().__init__(name)
        self.fn = fn

    def child_items(self):
        return (("g", self.fn),)

    def _constrain(self):
        changed = _same(self, "out_type", self.fn, "out_type")
        elem = _element_type(self.in_type, self)
        if elem is not None:
            changed |= self._set_out(elem)
            changed |= self.fn._set_in(TupleType((elem, elem)))
        return changed

    def _reduce(self, tr, items):
        if len(items) == 1:
            return items[0]
        mid = len(items) // 2
        return tr.trace(self.fn, (self._reduce(tr, items[:mid]), self._reduce(tr, items[mid:])))

    def _empty(self, tr):
        raise TraceError(f"{self._where()}: Reduce of an empty sequence")

    def _trace(self, tr, x):
        items = list(x) if isinstance(x, tuple) else _as_list(x, self)
        if not items:
            return self._empty(tr)
        return self._reduce(tr, items)


class Sum(Reduce):
    """Elementwise sum of a sequence; zeros for an empty one."""

    def __init__(self, name=None):
        super().__init__(Function(ops.Add()), name)

    def _empty(self, tr):
        return tr.zeros(self.out_type)


class ZipWith(Block):
    """Apply an n-ary block elementwise across n sequences.

    Stops at the shortest input; Broadcast inputs never limit the length.
    """

    def __init__(self, fn: Block, name=None):
        super().__init__(name)
        self.fn = fn

    def child_items(self):
        return (("f", self.fn),)

    def _constrain(self):
        changed = False
        t = self.in_type
        if t is not None:
            if not (isinstance(t, TupleType) and all(isinstance(s, SeqType) for s in t.items)):
                raise TypeMismatch(self._where(), "tuple of sequences", t)
            changed |= self.fn._set_in(TupleType(tuple(s.elem for s in t.items)))
        if isinstance(self.fn.in_type, TupleType):
            changed |= self._set_in(TupleType(tuple(SeqType(e) for e in self.fn.in_type.items)))
        if self.fn.out_type is not None:
            changed |= self._set_out(SeqType(self.fn.out_type))
        if isinstance(self.out_type, SeqType):
            changed |= self.fn._set_out(self.out_type.elem)
        return changed

    def _trace(self, tr, x):
        if not isinstance(x, tuple):
            raise TraceError(f"{self._where()}: expected a tuple of sequences")
        finite = [s for s in x if not isinstance(s, Repeat)]
        if not finite:
            if len(x) == 0:
                raise TraceError(f"{self._where()}: nothing to zip")
            # every input endless: the result is endless too
            return Repeat(tr.trace(self.fn, tuple(s.value for s in x)))
        seqs = [s if isinstance(s, Repeat) else _as_list(s, self) for s in x]
        n = min(len(s) for s in seqs if not isinstance(s, Repeat))
        return [
            tr.trace(self.fn, tuple(s.value if isinstance(s, Repeat) else s[i] for s in seqs))
            for i in range(n)
        ]


class Broadcast(Block):
    """Turn a value into an endless sequence of copies of it."""

    def _constrain(self):
        changed = False
        if self.in_type is not None:
            changed |= self._set_out(SeqType(self.in_type))
        if isinstance(self.out_type, SeqType):
            changed |= self._set_in(self.out_type.elem)
        return changed

    def _trace(self, tr, x):
        return Repeat(x)


# ---------------------------------------------------------------------------
# Composition scopes


class _ScopeInput:
    def __init__(self, comp: "Composition"):
        self.comp = comp

    def __getitem__(self, index: int) -> "_InputItem":
        return _InputItem(self.comp, index)

    def __repr__(self):
        return f"{self.comp.describe()}.input"


class _InputItem:
    def __init__(self, comp: "Composition", index: int):
        self.comp = comp
        self.index = index

    def __repr__(self):
        return f"{self.comp.describe()}.input[{self.index}]"


class _ScopeOutput:
    def __init__(self, comp: "Composition"):
        self.comp = comp

    def reads(self, *sources) -> None:
        self.comp._set_output(sources)


_SCOPES = threading.local()


class Composition(Block):
    """A block whose children are wired into a DAG with ``reads``.

    Inside ``with comp.scope():`` every ``block.reads(src, ...)`` adds a node
    whose input is ``src`` (or the tuple of several sources). Sources are
    other nodes, ``comp.input`` or ``comp.input[i]``; a node with no sources reads
    nothing (void input). ``comp.output.reads``
    declares the result.
    """

    def __init__(self, name=None, input_type=None, output_type=None):
        super().__init__(name, input_type, output_type)
        self.nodes: list[Block] = []
        self.wiring: dict[int, tuple] = {}
        self.output_sources: tuple | None = None
        self.input = _ScopeInput(self)
        self.output = _ScopeOutput(self)
        self._order: list[Block] | None = None

    @staticmethod
    def current() -> "Composition | None":
        stack = getattr(_SCOPES, "stack", None)
        return stack[-1] if stack else None

    @contextlib.contextmanager
    def scope(self):
        stack = _SCOPES.__dict__.setdefault("stack", [])
        stack.append(self)
        try:
            yield self
        finally:
            stack.pop()

    def _add_node(self, block: Block, sources) -> None:
        if id(block) in self.wiring:
            raise CompositionError(f"{block.describe()} is already wired in {self.describe()}")
        self.nodes.append(block)
        self.wiring[id(block)] = tuple(sources)
        self._order = None

    def _set_output(self, sources) -> None:
        if self.output_sources is not None:
            raise CompositionError(f"{self.describe()} output is already wired")
        if not sources:
            raise CompositionError("output.reads() needs at least one source")
        self.output_sources = tuple(sources)

    def child_items(self):
        return ((f"node{i}", b) for i, b in enumerate(self.nodes))

    # -- validation ------------------------------------------------------------

    def _check_source(self, src, reader: str) -> None:
        if isinstance(src, (_ScopeInput, _InputItem)):
            if src.comp is not self:
                raise CompositionError(f"{reader} reads the input of a different composition")
        elif isinstance(src, Block):
            if id(src) not in self.wiring:
                raise CompositionError(f"{reader} reads {src.describe()}, which is not wired into "
                                       f"{self.describe()}")
        else:
            raise CompositionError(f"{reader} reads an unsupported source {src!r}")

    def topological_order(self) -> list[Block]:
        """Nodes ordered so every node follows its sources; raises on cycles."""
        if self._order is not None:
            return self._order
        by_id = {id(b): b for b in self.nodes}
        deps = {
            id(b): [id(s) for s in self.wiring[id(b)] if isinstance(s, Block)]
            for b in self.nodes
        }
        state: dict[int, int] = {}
        order: list[Block] = []

        def visit(n, trail):
            s = state.get(n)
            if s == 2:
                return
            if s == 1:
                cycle = trail[trail.index(n):] + [n]
                names = " -> ".join(by_id[c].describe() for c in cycle)
                raise CompositionError(f"{self._where()}: cycle in composition wiring: {names}")
            state[n] = 1
            for d in deps[n]:
                visit(d, trail + [n])
            state[n] = 2
            order.append(by_id[n])

        for b in self.nodes:
            visit(id(b), [])
        self._order = order
        return order

    def _check_ready(self):
        for b in self.nodes:
            for src in self.wiring[id(b)]:
                self._check_source(src, b.describe())
        if self.output_sources is None:
            raise CompositionError(f"{self._where()}: output is not wired")
        for src in self.output_sources:
            self._check_source(src, f"{self.describe()}.output")
        self.topological_order()

    def _validate(self):
        sources = [s for b in self.nodes for s in self.wiring[id(b)]] + list(self.output_sources)
        reads_input = any(isinstance(s, (_ScopeInput, _InputItem)) for s in sources)
        if not reads_input and not isinstance(self.in_type, VoidType):
            warnings.warn(f"{self._where()}: composition input is never read", stacklevel=2)

    # -- typing ----------------------------------------------------------------

    def _source_type(self, src):
        if isinstance(src, _ScopeInput):
            return self.in_type
        if isinstance(src, _InputItem):
            t = self.in_type
            if t is None:
                return None
            if not isinstance(t, TupleType) or src.index >= len(t.items):
                raise TypeMismatch(self._where(), f"tuple input with element {src.index}", t)
            return t.items[src.index]
        return src.out_type

    def _sources_type(self, sources):
        if not sources:
            return VOID
        types = [self._source_type(s) for s in sources]
        if any(t is None for t in types):
            return None
        return types[0] if len(sources) == 1 else TupleType(types)

    def _constrain(self):
        changed = False
        for b in self.nodes:
            sources = self.wiring[id(b)]
            changed |= b._set_in(self._sources_type(sources))
            if len(sources) == 1 and b.in_type is not None:
                changed |= self._push_back(sources[0], b.in_type)
            elif isinstance(b.in_type, TupleType) and len(b.in_type.items) == len(sources):
                for s, t in zip(sources, b.in_type.items):
                    changed |= self._push_back(s, t)
        changed |= self._set_out(self._sources_type(self.output_sources))
        if len(self.output_sources) == 1 and self.out_type is not None:
            changed |= self._push_back(self.output_sources[0], self.out_type)
        if self.in_type is None:
            changed |= self._infer_input_from_items()
        return changed

    def _push_back(self, src, t) -> bool:
        if isinstance(src, _ScopeInput):
            return self._set_in(t)
        if isinstance(src, Block):
            return src._set_out(t)
        self._item_hints = getattr(self, "_item_hints", {})
        prev = self._item_hints.get(src.index)
        if prev is not None and prev != t:
            raise TypeMismatch(self._where(), prev, t, what=f"input[{src.index}] type")
        self._item_hints[src.index] = t
        return prev is None

    def _infer_input_from_items(self) -> bool:
        hints = getattr(self, "_item_hints", {})
        if not hints:
            return False
        n = max(hints) + 1
        if any(i not in hints for i in range(n)):
            return False
        return self._set_in(TupleType(tuple(hints[i] for i in range(n))))

    # -- tracing ---------------------------------------------------------------

    def _trace(self, tr, x):
        values: dict[int, Any] = {}

        def fetch(src):
            if isinstance(src, _ScopeInput):
                return x
            if isinstance(src, _InputItem):
                return x[src.index]
            return values[id(src)]

        def gather(sources):
            if not sources:
                return None
            return fetch(sources[0]) if len(sources) == 1 else tuple(fetch(s) for s in sources)

        for b in self.topological_order():
            values[id(b)] = tr.trace(b, gather(self.wiring[id(b)]))
        return gather(self.output_sources)


def composition_scope(nodes, wiring, output, name=None) -> Composition:
    """Build a Composition from explicit node/wiring lists.

    ``wiring`` maps node index to a tuple of sources, each an int (another
    node), ``"input"`` or ``("input", i)``. ``output`` is a tuple of the same.
    """
    comp = Composition(name)

    def resolve(src):
        if src == "input":
            return comp.input
        if isinstance(src, tuple) and src[0] == "input":
            return comp.input[src[1]]
        return nodes[src]

    for i, node in enumerate(nodes):
        comp._add_node(node, tuple(resolve(s) for s in wiring[i]))
    comp._set_output(tuple(resolve(s) for s in output))
    return comp


# ---------------------------------------------------------------------------
# Recursion


class ForwardDeclaration:
    """Placeholder for a block defined later, enabling recursive models.

    Call it to get a reference block; :meth:`resolve_to` later points every
    reference at the definition.
    """

    def __init__(self, name: str = "decl", input_type=None, output_type=None):
        self.name = name
        self.input_type = input_type
        self.output_type = output_type
        self.resolved: Block | None = None

    def __call__(self) -> "ForwardRef":
        return ForwardRef(self)

    def resolve_to(self, definition: Block) -> None:
        if self.resolved is not None:
            raise TypeCheckError(f"forward declaration {self.name!r} is already resolved")
        self.resolved = definition


def resolve_to(decl: ForwardDeclaration, definition: Block) -> None:
    decl.resolve_to(definition)


class ForwardRef(Block):
    def __init__(self, decl: ForwardDeclaration):
        super().__init__(None, decl.input_type, decl.output_type)
        self.decl = decl

    def describe(self):
        return f"ForwardRef({self.decl.name})"

    def child_items(self):
        if self.decl.resolved is None:
            return ()
        return (("def", self.decl.resolved),)

    def _check_ready(self):
        if self.decl.resolved is None:
            raise TypeCheckError(f"{self._where()}: forward declaration {self.decl.name!r} is unresolved")

    def _constrain(self):
        d = self.decl.resolved
        return _same(self, "in_type", d, "in_type") | _same(self, "out_type", d, "out_type")

    def _trace(self, tr, x):
        if self.decl.resolved is None:
            raise TraceError(f"forward declaration {self.decl.name!r} is unresolved")
        with tr.recursion(self.decl.name):
            return tr.trace(self.decl.resolved, x)


# ---------------------------------------------------------------------------
# Tracing


class Tracer:
    """Records constants and invocations while blocks run over host data."""

    def __init__(self, graph: InvocationGraph | None = None,
                 max_depth: int = DEFAULT_MAX_TRACE_DEPTH):
        self.graph = graph if graph is not None else InvocationGraph()
        self.max_depth = max_depth
        self.depth = 0

    def trace(self, block: Block, x):
        return block._trace(self, x)

    @contextlib.contextmanager
    def recursion(self, name: str):
        self.depth += 1
        if self.depth > self.max_depth:
            self.depth = 0
            raise TraceError(f"trace depth limit {self.max_depth} exceeded while expanding {name!r}; "
                             "is the recursion missing a OneOf base case?")
        try:
            yield
        finally:
            self.depth = max(self.depth - 1, 0)

    def constant(self, value, ttype: TensorType) -> Ref:
        arr = np.asarray(value)
        if arr.dtype.kind not in "biuf":
            raise TraceError(f"cannot convert {type(value).__name__} to {ttype}")
        arr = np.array(arr, dtype=ttype.dtype, order="C")
        if arr.shape != ttype.shape:
            raise TraceError(f"host value of shape {list(arr.shape)} does not match {ttype}")
        return self.graph.add_constant(arr, ttype)

    def zeros(self, t: BlockType):
        if isinstance(t, TensorType):
            return self.graph.add_constant(np.zeros(t.shape, dtype=t.dtype), t)
        if isinstance(t, TupleType):
            return tuple(self.zeros(item) for item in t.items)
        raise TraceError(f"cannot make zeros of type {t}")

    def invoke(self, op, refs: list[Ref], out_types) -> list[Ref]:
        return self.graph.add_invocation(op, refs, out_types)


def call_with_deep_stack(fn, *args, stack_mb: int = 512, recursion_limit: int = 200_000):
    """Run ``fn`` in a helper thread with a large stack.

    Tracing recursive blocks nests Python calls a few frames per tree level;
    this keeps the configured trace depth limit reachable without crashing.
    """
    result: dict = {}

    def target():
        old = sys.getrecursionlimit()
        sys.setrecursionlimit(max(old, recursion_limit))
        try:
            result["value"] = fn(*args)
        except BaseException as e:  # re-raised in the caller
            result["error"] = e
        finally:
            sys.setrecursionlimit(old)

    old_size = threading.stack_size()
    threading.stack_size(stack_mb * 1024 * 1024)
    try:
        t = threading.Thread(target=target)
        t.start()
    finally:
        threading.stack_size(old_size)
    t.join()
    if "error" in result:
        raise result["error"]
    return result["value"]


def _ensure_typed(root: Block) -> None:
    if root.in_type is None or root.out_type is None:
        infer_types(root)


def trace(root: Block, host_input, graph: InvocationGraph | None = None,
          max_depth: int = DEFAULT_MAX_TRACE_DEPTH):
    """Apply ``root`` to ``host_input``; returns ``(graph, result)``.

    ``result`` mirrors the block's output type with a :class:`Ref` for each
    tensor. The result is also appended to ``graph.results``.
    """
    _ensure_typed(root)
    tr = Tracer(graph, max_depth)
    result = tr.trace(root, host_input)
    tr.graph.results.append(result)
    return tr.graph, result


# ---------------------------------------------------------------------------
# Diagnostics


def format_block(root: Block) -> str:
    """Indented block tree with inferred types (``--dump-block``)."""
    lines: list[str] = []
    shown: set[int] = set()
    pending: list[ForwardDeclaration] = []

    def sig(b):
        from .type_system import pretty

        return f"{pretty(b.in_type)} -> {pretty(b.out_type)}"

    def walk(b, indent, label):
        prefix = "  " * indent + (f"{label}: " if label else "")
        lines.append(f"{prefix}{b.describe()} :: {sig(b)}")
        if isinstance(b, ForwardRef):
            if b.decl.resolved is not None and id(b.decl) not in shown:
                shown.add(id(b.decl))
                pending.append(b.decl)
            return
        if isinstance(b, Composition):
            for i, node in enumerate(b.nodes):
                srcs = ", ".join(_source_name(b, s) for s in b.wiring[id(node)])
                walk(node, indent + 1, f"node{i} <- {srcs}")
            outs = ", ".join(_source_name(b, s) for s in b.output_sources or ())
            lines.append("  " * (indent + 1) + f"output <- {outs}")
            return
        for child_label, child in b.child_items():
            walk(child, indent + 1, child_label)

    walk(root, 0, "")
    while pending:
        decl = pending.pop(0)
        lines.append(f"where {decl.name} =")
        walk(decl.resolved, 1, "")
    return "\n".join(lines)


def _source_name(comp: Composition, src) -> str:
    if isinstance(src, _ScopeInput):
        return "input"
    if isinstance(src, _InputItem):
        return f"input[{src.index}]"
    return f"node{comp.nodes.index(src)}"
