"""Dynamic batching for dynamic computation graphs.

Build per-input computations from blocks, compile them, and run whole batches
of differently shaped inputs with one kernel call per (depth, operation).
"""

from .blocks import (
    AllOf,
    Block,
    Broadcast,
    Composition,
    Concat,
    Fold,
    ForwardDeclaration,
    Function,
    GetItem,
    Identity,
    InputTransform,
    Map,
    OneOf,
    Optional,
    Record,
    Reduce,
    Scalar,
    Sum,
    Tensor,
    TraceError,
    Zeros,
    ZipWith,
    format_block,
    pipe,
    trace,
)
from .dyn_batch import Compiler, Schedule, compile_block
from .runtime import ParameterStore, run_backward, run_forward
from .type_system import INPUT, VOID, Seq, SeqType, TensorType, Tuple, TupleType

__version__ = "0.1.0"
