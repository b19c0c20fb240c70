"""Dense float64 tensors on a define-by-run tape with reverse-mode gradients."""

from ppltape.autodiff import ops
from ppltape.autodiff.gradcheck import GradCheckReport, grad_check, relative_error
from ppltape.autodiff.ops import lift, tensor_of
from ppltape.autodiff.tape import (
    Parameter,
    ParamStore,
    Tape,
    Value,
    active_tape,
    as_tensor,
    backward,
    current_tape,
)

__all__ = [
    "GradCheckReport",
    "ParamStore",
    "Parameter",
    "Tape",
    "Value",
    "active_tape",
    "as_tensor",
    "backward",
    "current_tape",
    "grad_check",
    "lift",
    "ops",
    "relative_error",
    "tensor_of",
]
