"""Deterministic 1-D tensor kernels with reverse-mode autodiff and AdamW."""
from . import ops
from .gradcheck import GradCheckReport, NonDeterministicError, grad_check, grad_check_report
from .ops import (
    ShapeError,
    conv1d,
    elementwise,
    layernorm,
    linear,
)
from .optim import AdamW, OptimState, adamw_step, cosine_lr
from .tensor import (
    Graph,
    GraphError,
    NonFiniteError,
    Tensor,
    backward,
    get_default_dtype,
    no_grad,
    parameter,
    set_default_dtype,
)

__all__ = [
    "AdamW", "GradCheckReport", "Graph", "GraphError", "NonDeterministicError", "NonFiniteError",
    "OptimState", "ShapeError", "Tensor", "adamw_step", "backward", "conv1d", "cosine_lr",
    "elementwise", "get_default_dtype", "grad_check", "grad_check_report", "layernorm", "linear",
    "no_grad", "ops", "parameter", "set_default_dtype",
]
