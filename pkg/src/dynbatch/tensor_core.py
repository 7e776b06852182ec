"""Dense batched kernels and their adjoints.

Tensors are plain numpy arrays restricted to three dtypes. The leading axis is
always the batch axis, and no kernel broadcasts implicitly: operands must agree
exactly in dtype and shape.
"""

from __future__ import annotations

import enum

import numpy as np


class DType(enum.Enum):
    FLOAT32 = "float32"
    FLOAT64 = "float64"
    INT32 = "int32"

    @property
    def np(self) -> np.dtype:
        return np.dtype(self.value)

    @property
    def is_floating(self) -> bool:
        return self is not DType.INT32

    @classmethod
    def of(cls, x) -> "DType":
        try:
            return cls(np.dtype(getattr(x, "dtype", x)).name)
        except ValueError:
            raise KernelTypeError(f"unsupported dtype {np.dtype(getattr(x, 'dtype', x))}") from None


class KernelError(Exception):
    """Base class for kernel failures.

    ``context`` is filled in by the runtime (depth and operation name), since a
    scheduler bug usually surfaces as a bad gather deep inside a kernel.
    """

    def __init__(self, message: str, context: str | None = None):
        super().__init__(message)
        self.message = message
        self.context = context

    def with_context(self, context: str) -> "KernelError":
        self.context = context
        return self

    def __str__(self) -> str:
        if self.context:
            return f"{self.message} [{self.context}]"
        return self.message


class KernelTypeError(KernelError, TypeError):
    pass


class KernelIndexError(KernelError, IndexError):
    pass


class ContractError(KernelError, ValueError):
    pass


def tensor(data, dtype: DType | str = DType.FLOAT32) -> np.ndarray:
    dtype = DType(dtype) if isinstance(dtype, str) else dtype
    return np.ascontiguousarray(np.asarray(data, dtype=dtype.np))


_FLOATS = (np.dtype("float32"), np.dtype("float64"))


def _check_float(x: np.ndarray, what: str) -> None:
    if x.dtype not in _FLOATS:
        raise KernelTypeError(f"{what} requires a floating dtype, got {x.dtype}")


def _check_same(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.dtype != b.dtype or a.shape != b.shape:
        raise KernelTypeError(
            f"{what}: operands differ ({a.dtype}{list(a.shape)} vs {b.dtype}{list(b.shape)})"
        )


# -- row movement -------------------------------------------------------------


def concat_rows(inputs: list[np.ndarray]) -> np.ndarray:
    if not inputs:
        raise ContractError("concat_rows of an empty list")
    first = inputs[0]
    for x in inputs[1:]:
        if x.dtype != first.dtype or x.shape[1:] != first.shape[1:]:
            raise KernelTypeError(
                f"concat_rows: {x.dtype}{list(x.shape[1:])} does not match "
                f"{first.dtype}{list(first.shape[1:])}"
            )
    if len(inputs) == 1:
        return first
    return np.concatenate(inputs, axis=0)


def split_rows(x: np.ndarray, counts: list[int]) -> list[np.ndarray]:
    """Inverse of :func:`concat_rows` given the per-part row counts."""
    if sum(counts) != x.shape[0]:
        raise ContractError(f"split_rows: counts sum to {sum(counts)}, tensor has {x.shape[0]} rows")
    offsets = np.cumsum(counts)[:-1]
    return np.split(x, offsets, axis=0)


def _as_index(idx, n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ContractError("row indices must be a flat list")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise KernelIndexError(f"row index {bad} out of range for {n} rows")
    return idx


def gather_rows(x: np.ndarray, idx) -> np.ndarray:
    return x[_as_index(idx, x.shape[0])]


def take_rows(x: np.ndarray, idx: np.ndarray, out: np.ndarray | None = None,
              bounds: tuple[int, int] | None = None) -> np.ndarray:
    """:func:`gather_rows` for an ``intp`` index array, optionally writing
    into ``out``. ``bounds`` is the known ``(min, max)`` of ``idx``; the
    range check then costs nothing per row. Out-of-range indices raise
    :class:`KernelIndexError`."""
    if idx.size:
        lo, hi = bounds if bounds is not None else (int(idx.min()), int(idx.max()))
        if lo < 0 or hi >= x.shape[0]:
            _as_index(idx, x.shape[0])
    # indices are known to be in range, and "clip" lets numpy skip buffering
    return np.take(x, idx, axis=0, out=out, mode="clip")


def scatter_add_rows(grad: np.ndarray, idx, out_rows: int) -> np.ndarray:
    idx = _as_index(idx, out_rows)
    if idx.shape[0] != grad.shape[0]:
        raise ContractError(f"scatter_add_rows: {idx.shape[0]} indices for {grad.shape[0]} rows")
    out = np.zeros((out_rows,) + grad.shape[1:], dtype=grad.dtype)
    np.add.at(out, idx, grad)
    return out


# -- dense algebra --------------------------------------------------------------


def matmul(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    _check_float(a, "matmul")
    if a.ndim != 2 or w.ndim != 2 or a.shape[1] != w.shape[0]:
        raise KernelTypeError(f"matmul: cannot multiply {list(a.shape)} by {list(w.shape)}")
    if a.dtype != w.dtype:
        raise KernelTypeError(f"matmul: dtype {a.dtype} vs {w.dtype}")
    return a @ w


def matmul_vjp(a: np.ndarray, w: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return g @ w.T, a.T @ g


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "max": np.maximum,
}


def ew_binary(kind: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if kind not in _BINARY:
        raise ContractError(f"unknown binary kernel {kind!r}")
    _check_same(a, b, kind)
    if kind == "div":
        with np.errstate(divide="ignore", invalid="ignore"):
            return a / b
    return _BINARY[kind](a, b)


def ew_binary_vjp(kind: str, a, b, g) -> tuple[np.ndarray, np.ndarray]:
    if kind == "add":
        return g, g
    if kind == "sub":
        return g, -g
    if kind == "mul":
        return g * b, g * a
    if kind == "div":
        with np.errstate(divide="ignore", invalid="ignore"):
            return g / b, -g * a / (b * b)
    if kind == "max":
        # ties route the gradient to the first operand
        left = a >= b
        return np.where(left, g, 0).astype(g.dtype), np.where(left, 0, g).astype(g.dtype)
    raise ContractError(f"unknown binary kernel {kind!r}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows; one temporary
    y = np.multiply(x, 0.5)
    np.tanh(y, out=y)
    y += 1
    y *= 0.5
    return y


_UNARY = {
    "exp": np.exp,
    "tanh": np.tanh,
    "sigmoid": _sigmoid,
    "relu": lambda x: np.maximum(x, 0).astype(x.dtype, copy=False),
    "neg": np.negative,
    "identity": lambda x: x,
}


def ew_unary(kind: str, x: np.ndarray) -> np.ndarray:
    if kind not in _UNARY:
        raise ContractError(f"unknown unary kernel {kind!r}")
    _check_float(x, kind)
    return _UNARY[kind](x)


def ew_unary_vjp(kind: str, x, out, g) -> np.ndarray:
    if kind == "exp":
        return g * out
    if kind == "tanh":
        return g * (1 - out * out)
    if kind == "sigmoid":
        return g * out * (1 - out)
    if kind == "relu":
        return g * (x > 0)
    if kind == "neg":
        return -g
    if kind == "identity":
        return g
    raise ContractError(f"unknown unary kernel {kind!r}")


def reduce_sum(x: np.ndarray, axis: int) -> np.ndarray:
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"reduce_sum: axis {axis} invalid for rank {x.ndim}")
    return x.sum(axis=axis)


def reduce_sum_vjp(x_shape: tuple, axis: int, g: np.ndarray) -> np.ndarray:
    return np.broadcast_to(np.expand_dims(g, axis), x_shape).copy()


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> None:
    _check_float(logits, "softmax_cross_entropy")
    if logits.ndim != 2 or labels.shape != logits.shape[:1]:
        raise KernelTypeError(
            f"softmax_cross_entropy: logits {list(logits.shape)} vs labels {list(labels.shape)}"
        )
    if DType.of(labels) is not DType.INT32:
        raise KernelTypeError("softmax_cross_entropy labels must be int32")
    n = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise KernelIndexError(f"label out of range for {n} classes")


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    _check_labels(logits, labels)
    rows = np.arange(logits.shape[0])
    top = logits.argmax(axis=1)
    shifted = logits - logits[rows, top][:, None]
    # the max term is exactly 1; log1p of the rest keeps tiny losses accurate
    rest = np.exp(shifted)
    rest[rows, top] = 0
    log_z = np.log1p(rest.sum(axis=1))
    return log_z - shifted[rows, labels]


def softmax_cross_entropy_vjp(logits, labels, g) -> np.ndarray:
    p = softmax(logits)
    p[np.arange(logits.shape[0]), labels] -= 1
    return p * g[:, None]
