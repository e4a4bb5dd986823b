"""Minimal reverse-mode autodiff engine with exactly the ops the models need."""

from .tensor import (
    GradientError,
    ShapeError,
    Tape,
    Tensor,
    UnknownPrimitiveError,
    active_tape,
    backward,
    debug_checks_enabled,
    no_grad,
    parameter,
    set_debug_checks,
)
from .ops import (
    abs_,
    add,
    amax,
    apply_primitive,
    as_tensor,
    concat,
    cross_entropy_loss,
    cumsum_steps,
    detach,
    layer_norm,
    linear,
    matmul,
    maximum,
    mean,
    mul,
    neg,
    primitive_ids,
    relu,
    reshape,
    scalar,
    sdpa,
    slice_,
    smooth_l1_loss,
    softmax,
    sum_,
    tanh,
)
from .optim import OptimState, adamw_step, clip_global_norm, cosine_alpha, zero_grads

__all__ = [
    "GradientError",
    "ShapeError",
    "Tape",
    "Tensor",
    "UnknownPrimitiveError",
    "OptimState",
    "abs_",
    "active_tape",
    "adamw_step",
    "add",
    "amax",
    "apply_primitive",
    "as_tensor",
    "backward",
    "clip_global_norm",
    "concat",
    "cosine_alpha",
    "cross_entropy_loss",
    "cumsum_steps",
    "debug_checks_enabled",
    "detach",
    "layer_norm",
    "linear",
    "matmul",
    "maximum",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "parameter",
    "primitive_ids",
    "relu",
    "reshape",
    "scalar",
    "sdpa",
    "set_debug_checks",
    "slice_",
    "smooth_l1_loss",
    "softmax",
    "sum_",
    "tanh",
    "zero_grads",
]
