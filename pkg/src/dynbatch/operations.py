"""Operations: batch-polymorphic sub-graphs that the scheduler batches.

An operation has fixed tensor types on every input and output, but works for
any leading batch size. ``forward`` returns the outputs plus whatever it needs
to save for ``backward``; ``backward`` returns input gradients (``None`` for
integer inputs) and gradients for the named parameters it reads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import tensor_core as tc
from .type_system import (
    BlockType,
    TensorType,
    TupleType,
    flatten_tensor_types,
    is_tensor_tuple,
)

ACTIVATIONS = (None, "relu", "tanh", "sigmoid", "exp")


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    dtype: str
    init: Any = "glorot"  # "glorot", "zeros", "normal", or an explicit array
    # (fan_in, fan_out) for glorot when the matrix packs several layers side by side
    fans: tuple[int, int] | None = None


class Operation:
    """Base class. Subclasses set ``name`` and override the hooks below.

    ``input_type`` pins the operation's input when it is known up front;
    ``None`` means it is inferred from whatever feeds the Function block.
    """

    input_type: BlockType | None = None
    label = "op"

    def __init__(self, name: str | None = None):
        # anonymous operations are named by the compiler, in enumeration order
        self.name = name

    def output_type(self, in_type: BlockType) -> BlockType:
        raise NotImplementedError

    def param_specs(self, inputs: tuple[TensorType, ...]) -> list[ParamSpec]:
        return []

    def forward(self, params: dict, inputs: list[np.ndarray]):
        raise NotImplementedError

    def backward(self, params: dict, cache, grads: list[np.ndarray]):
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name or self.label!r})"


def _require_tensor(t: BlockType, what: str) -> TensorType:
    if not isinstance(t, TensorType):
        raise TypeError(f"{what} expects a tensor, got {t}")
    return t


def _require_float(t: TensorType, what: str) -> None:
    if t.dtype not in ("float32", "float64"):
        raise TypeError(f"{what} expects a floating tensor, got {t}")


class Embedding(Operation):
    """Row lookup into a trainable table.

    With ``num_outputs=k`` the table row is cut into ``k`` equal slices and
    each slice is a separate output; one lookup then yields a whole state tuple.
    """

    def __init__(self, name: str, vocab_size: int | None = None, dim: int | None = None,
                 initializer=None, dtype: str = "float32", num_outputs: int = 1):
        super().__init__(name)
        if initializer is not None:
            initializer = np.asarray(initializer, dtype=dtype)
            vocab_size, width = initializer.shape
            if width % num_outputs:
                raise ValueError("table width must divide evenly between outputs")
            dim = width // num_outputs
        if vocab_size is None or dim is None:
            raise ValueError("Embedding needs an initializer or vocab_size and dim")
        self.vocab_size = vocab_size
        self.dim = dim
        self.dtype = dtype
        self.num_outputs = num_outputs
        self.initializer = initializer
        self.input_type = TensorType("int32", ())

    def output_type(self, in_type):
        out = TensorType(self.dtype, (self.dim,))
        return out if self.num_outputs == 1 else TupleType((out,) * self.num_outputs)

    def param_specs(self, inputs):
        init = self.initializer if self.initializer is not None else "normal"
        return [ParamSpec(f"{self.name}/table", (self.vocab_size, self.dim * self.num_outputs),
                          self.dtype, init)]

    def forward(self, params, inputs):
        (idx,) = inputs
        rows = tc.gather_rows(params[f"{self.name}/table"], idx)
        if self.num_outputs == 1:
            return [rows], idx
        return list(np.split(rows, self.num_outputs, axis=1)), idx

    def backward(self, params, idx, grads):
        g = grads[0] if self.num_outputs == 1 else np.concatenate(grads, axis=1)
        table = params[f"{self.name}/table"]
        return [None], {f"{self.name}/table": tc.scatter_add_rows(g, idx, table.shape[0])}


class FC(Operation):
    """Fully connected layer ``act(x W + b)``; input width is inferred."""

    def __init__(self, name: str, out_dim: int, activation: str | None = None):
        super().__init__(name)
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.out_dim = out_dim
        self.activation = activation

    def output_type(self, in_type):
        t = _require_tensor(in_type, f"FC {self.name!r}")
        _require_float(t, f"FC {self.name!r}")
        if len(t.shape) != 1:
            raise TypeError(f"FC {self.name!r} expects a vector, got {t}")
        return TensorType(t.dtype, (self.out_dim,))

    def param_specs(self, inputs):
        (t,) = inputs
        return [
            ParamSpec(f"{self.name}/w", (t.shape[0], self.out_dim), t.dtype, "glorot"),
            ParamSpec(f"{self.name}/b", (self.out_dim,), t.dtype, "zeros"),
        ]

    def forward(self, params, inputs):
        (x,) = inputs
        pre = tc.matmul(x, params[f"{self.name}/w"]) + params[f"{self.name}/b"]
        y = pre if self.activation is None else tc.ew_unary(self.activation, pre)
        return [y], (x, pre, y)

    def backward(self, params, cache, grads):
        x, pre, y = cache
        g = grads[0]
        if self.activation is not None:
            g = tc.ew_unary_vjp(self.activation, pre, y, g)
        dx, dw = tc.matmul_vjp(x, params[f"{self.name}/w"], g)
        return [dx], {f"{self.name}/w": dw, f"{self.name}/b": g.sum(axis=0)}


class Unary(Operation):
    def __init__(self, kind: str, name: str | None = None):
        super().__init__(name)
        self.kind = kind
        self.label = kind

    def output_type(self, in_type):
        t = _require_tensor(in_type, self.label)
        _require_float(t, self.label)
        return t

    def forward(self, params, inputs):
        (x,) = inputs
        y = tc.ew_unary(self.kind, x)
        return [y], (x, y)

    def backward(self, params, cache, grads):
        x, y = cache
        return [tc.ew_unary_vjp(self.kind, x, y, grads[0])], {}


class Binary(Operation):
    def __init__(self, kind: str, name: str | None = None):
        super().__init__(name)
        self.kind = kind
        self.label = kind

    def output_type(self, in_type):
        if not (isinstance(in_type, TupleType) and len(in_type.items) == 2):
            raise TypeError(f"{self.label} expects a pair of tensors, got {in_type}")
        a, b = in_type.items
        _require_tensor(a, self.label)
        if a != b:
            raise TypeError(f"{self.label} operands must have equal types, got {a} and {b}")
        return a

    def forward(self, params, inputs):
        a, b = inputs
        return [tc.ew_binary(self.kind, a, b)], (a, b)

    def backward(self, params, cache, grads):
        a, b = cache
        return list(tc.ew_binary_vjp(self.kind, a, b, grads[0])), {}


def Exp(name=None):  # noqa: N802 - operation constructors read like classes
    return Unary("exp", name)


def Tanh(name=None):  # noqa: N802
    return Unary("tanh", name)


def Relu(name=None):  # noqa: N802
    return Unary("relu", name)


def Add(name=None):  # noqa: N802
    return Binary("add", name)


def Mul(name=None):  # noqa: N802
    return Binary("mul", name)


def Div(name=None):  # noqa: N802
    return Binary("div", name)


class BroadcastTo(Operation):
    """Tile a length-1 vector to length ``dim`` (explicit scalar broadcast)."""

    label = "broadcast_to"

    def __init__(self, dim: int, name: str | None = None):
        super().__init__(name)
        self.dim = dim

    def output_type(self, in_type):
        t = _require_tensor(in_type, self.label)
        if t.shape != (1,):
            raise TypeError(f"{self.label} expects a length-1 vector, got {t}")
        return TensorType(t.dtype, (self.dim,))

    def forward(self, params, inputs):
        (x,) = inputs
        return [np.repeat(x, self.dim, axis=1)], None

    def backward(self, params, cache, grads):
        return [tc.reduce_sum(grads[0], 1)[:, None]], {}


class ReduceSum(Operation):
    """Sum a tensor along one of its (non-batch) axes."""

    label = "reduce_sum"

    def __init__(self, axis: int = 0, name: str | None = None):
        super().__init__(name)
        self.axis = axis

    def output_type(self, in_type):
        t = _require_tensor(in_type, self.label)
        if not 0 <= self.axis < len(t.shape):
            raise TypeError(f"{self.label}: axis {self.axis} invalid for {t}")
        return TensorType(t.dtype, t.shape[: self.axis] + t.shape[self.axis + 1:])

    def forward(self, params, inputs):
        (x,) = inputs
        return [tc.reduce_sum(x, self.axis + 1)], x.shape

    def backward(self, params, shape, grads):
        return [tc.reduce_sum_vjp(shape, self.axis + 1, grads[0])], {}


class CrossEntropy(Operation):
    """Sparse softmax cross-entropy over ``(logits, label)`` pairs."""

    label = "cross_entropy"

    def output_type(self, in_type):
        if not (isinstance(in_type, TupleType) and len(in_type.items) == 2):
            raise TypeError(f"{self.label} expects (logits, label), got {in_type}")
        logits, label = in_type.items
        logits = _require_tensor(logits, self.label)
        _require_float(logits, self.label)
        if len(logits.shape) != 1 or label != TensorType("int32", ()):
            raise TypeError(f"{self.label} expects (f[n], i32[]), got {in_type}")
        return TensorType(logits.dtype, ())

    def forward(self, params, inputs):
        logits, labels = inputs
        return [tc.softmax_cross_entropy(logits, labels)], (logits, labels)

    def backward(self, params, cache, grads):
        logits, labels = cache
        return [tc.softmax_cross_entropy_vjp(logits, labels, grads[0]), None], {}


class Concat(Operation):
    """Concatenate a tuple of tensors along their first (feature) axis."""

    label = "concat"

    def output_type(self, in_type):
        if not (isinstance(in_type, TupleType) and is_tensor_tuple(in_type)):
            raise TypeError(f"Concat expects a tuple of tensors, got {in_type}")
        parts = flatten_tensor_types(in_type)
        head = parts[0]
        for p in parts:
            if p.dtype != head.dtype or len(p.shape) < 1 or p.shape[1:] != head.shape[1:]:
                raise TypeError(f"Concat cannot join {in_type}")
        return TensorType(head.dtype, (sum(p.shape[0] for p in parts),) + head.shape[1:])

    def forward(self, params, inputs):
        widths = [x.shape[1] for x in inputs]
        return [np.concatenate(inputs, axis=1)], widths

    def backward(self, params, widths, grads):
        offsets = np.cumsum(widths)[:-1]
        return list(np.split(grads[0], offsets, axis=1)), {}


class PassThrough(Operation):
    """Identity used to carry a value forward by one depth level."""

    label = "pass"

    def __init__(self, ttype: TensorType):
        super().__init__(f"pass<{ttype}>")
        self.ttype = ttype
        self.input_type = ttype

    def output_type(self, in_type):
        return self.ttype

    def forward(self, params, inputs):
        return [inputs[0]], None

    def backward(self, params, cache, grads):
        return [grads[0]], {}


class OperationRegistry:
    """Name -> operation lookup so Function blocks can refer to ops by name."""

    def __init__(self):
        self._ops: dict[str, Operation] = {}

    def register(self, op: Operation, name: str | None = None) -> str:
        name = name or op.name
        if name is None:
            raise ValueError("registered operations need a name")
        if op.name is None:
            op.name = name
        if name in self._ops:
            raise ValueError(f"operation {name!r} already registered")
        self._ops[name] = op
        return name

    def __getitem__(self, name: str) -> Operation:
        try:
            return self._ops[name]
        except KeyError:
            raise KeyError(f"no operation named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._ops


def register_operation(registry: OperationRegistry, name: str, op: Operation) -> str:
    return registry.register(op, name)


def embedding(table_name: str, **kwargs) -> Embedding:
    return Embedding(table_name, **kwargs)


def fully_connected(name: str, out_dim: int, activation: str | None = None) -> FC:
    return FC(name, out_dim, activation)


def concat_feature_axis(name: str | None = None) -> Concat:
    return Concat(name)
