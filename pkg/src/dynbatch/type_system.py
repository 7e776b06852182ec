"""Static block types and the inference pass run by the compiler.

Types are structural values: ``Input``, ``Tensor(dtype, shape)``, ``Tuple``,
``Seq`` and ``Void``. The batch dimension is never part of a tensor shape.

Inference is plain constraint propagation. Each block knows the local rule
linking its own input/output types to those of its children (``_constrain``);
:func:`infer_types` applies all rules until nothing changes. Only fully known
types are ever assigned, so a block either has its final type or none.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Union

_ABBREV = {
    "float16": "f16",
    "float32": "f32",
    "float64": "f64",
    "int8": "i8",
    "int16": "i16",
    "int32": "i32",
    "int64": "i64",
    "uint8": "u8",
    "bool": "bool",
}


@dataclass(frozen=True)
class TensorType:
    dtype: str
    shape: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if any(d < 0 for d in self.shape):
            raise ValueError(f"negative extent in shape {self.shape}")

    @property
    def size(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n

    def __str__(self) -> str:
        return f"{_ABBREV.get(self.dtype, self.dtype)}[{','.join(map(str, self.shape))}]"


@dataclass(frozen=True)
class InputType:
    def __str__(self) -> str:
        return "input"


@dataclass(frozen=True)
class VoidType:
    def __str__(self) -> str:
        return "void"


@dataclass(frozen=True)
class TupleType:
    items: tuple

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if not self.items:
            raise ValueError("tuple types need at least one element")

    def __str__(self) -> str:
        return "(" + ", ".join(map(str, self.items)) + ")"


@dataclass(frozen=True)
class SeqType:
    elem: "BlockType"

    def __str__(self) -> str:
        return f"seq<{self.elem}>"


BlockType = Union[InputType, TensorType, TupleType, SeqType, VoidType]

INPUT = InputType()
VOID = VoidType()


def Tuple(*items) -> TupleType:  # noqa: N802 - reads like the type constructor
    return TupleType(items)


def Seq(elem) -> SeqType:  # noqa: N802
    return SeqType(elem)


def type_equal(a: BlockType | None, b: BlockType | None) -> bool:
    return a == b


def pretty(t: BlockType | None) -> str:
    return "?" if t is None else str(t)


def is_tensor_tuple(t: BlockType) -> bool:
    """True for a tensor or an arbitrarily nested tuple of tensors."""
    if isinstance(t, TensorType):
        return True
    if isinstance(t, TupleType):
        return all(is_tensor_tuple(x) for x in t.items)
    return False


def flatten_tensor_types(t: BlockType) -> list[TensorType]:
    if isinstance(t, TensorType):
        return [t]
    if isinstance(t, TupleType):
        return [leaf for item in t.items for leaf in flatten_tensor_types(item)]
    raise TypeError(f"{t} is not a tensor or tuple of tensors")


class TypeCheckError(Exception):
    pass


class TypeMismatch(TypeCheckError):
    def __init__(self, location: str, expected, found, what: str = "type"):
        self.location = location
        self.expected = expected
        self.found = found
        super().__init__(f"{location}: {what} mismatch, expected {pretty(expected)}, found {pretty(found)}")


class Underdetermined(TypeCheckError):
    def __init__(self, location: str, detail: str = ""):
        self.location = location
        msg = f"{location}: type could not be inferred"
        super().__init__(msg + (f" ({detail})" if detail else ""))


@dataclass(frozen=True)
class Signature:
    """Fixed tensor types of one enumerated operation."""

    name: str
    inputs: tuple[TensorType, ...]
    outputs: tuple[TensorType, ...]
    op: object = field(compare=False, repr=False, default=None)

    def __str__(self) -> str:
        ins = ", ".join(map(str, self.inputs))
        outs = ", ".join(map(str, self.outputs))
        return f"{self.name}: ({ins}) -> ({outs})"


def iter_blocks(root) -> Iterator:
    """Depth-first, left-to-right walk; resolved forward references are
    followed once. Assigns each block its diagnostic ``path``."""
    seen: set[int] = set()

    def walk(block, path):
        if id(block) in seen:
            return
        seen.add(id(block))
        if block.path is None:
            block.path = path
        yield block
        for label, child in block.child_items():
            yield from walk(child, f"{block.path}/{label}:{child.describe()}")

    yield from walk(root, root.describe())


def infer_types(root):
    """Annotate every block in ``root`` with its input and output type.

    Raises :class:`TypeMismatch` on conflicting constraints and
    :class:`Underdetermined` when some edge stays unpinned. Running it again on
    an annotated tree changes nothing.
    """
    blocks = list(iter_blocks(root))
    for b in blocks:
        b._check_ready()
        if b.declared_in is not None:
            b._set_in(b.declared_in)
        if b.declared_out is not None:
            b._set_out(b.declared_out)

    def settle():
        changed = True
        while changed:
            changed = False
            for b in blocks:
                changed |= bool(b._constrain())

    settle()
    # A block whose input is never pinned (a bare Zeros, a Scalar at the
    # root...) takes its default input type, then propagation resumes.
    for b in blocks:
        if b.in_type is None and b.default_in is not None:
            b._set_in(b.default_in)
            settle()
    for b in blocks:
        if b.in_type is None:
            raise Underdetermined(b.path, "input")
        if b.out_type is None:
            raise Underdetermined(b.path, "output")
    for b in blocks:
        b._validate()
    return root


def check_schedulable(root) -> list[Signature]:
    """Enumerate the distinct operations reachable from ``root``.

    Order is first appearance in a depth-first, left-to-right walk. An
    operation used from several Function blocks is listed once and must have
    the same tensor types everywhere.
    """
    name_anonymous_ops(root)
    sigs: dict[int, Signature] = {}
    order: list[Signature] = []
    for b in iter_blocks(root):
        sig = b.signature()
        if sig is None:
            continue
        prev = sigs.get(id(sig.op))
        if prev is None:
            sigs[id(sig.op)] = sig
            order.append(sig)
        elif (prev.inputs, prev.outputs) != (sig.inputs, sig.outputs):
            raise TypeMismatch(b.path, prev, sig, what=f"operation {sig.name!r} signature")
    names = [s.name for s in order]
    dup = {n for n in names if names.count(n) > 1}
    if dup:
        raise TypeCheckError(f"operation names must be unique, repeated: {sorted(dup)}")
    return order


def name_anonymous_ops(root) -> None:
    """Give unnamed operations deterministic names (``exp``, ``exp_1``, ...)
    in walk order, avoiding names already taken."""
    found = []
    for b in iter_blocks(root):
        op = getattr(b, "op", None)
        if op is not None and not isinstance(op, str) and all(op is not f for f in found):
            found.append(op)
    taken = {op.name for op in found if op.name is not None}
    counts: dict[str, int] = {}
    for op in found:
        if op.name is not None:
            continue
        k = counts.get(op.label, 0)
        while True:
            candidate = op.label if k == 0 else f"{op.label}_{k}"
            k += 1
            if candidate not in taken:
                break
        counts[op.label] = k
        op.name = candidate
        taken.add(candidate)
