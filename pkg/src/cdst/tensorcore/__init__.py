from . import checkpoint, ops
from .optim import NonFiniteGradient, OptimizerState, adamw_step
from .tensor import ShapeError, Tensor, as_tensor, grad_enabled, no_grad, parameter

__all__ = [
    "NonFiniteGradient",
    "OptimizerState",
    "ShapeError",
    "Tensor",
    "adamw_step",
    "as_tensor",
    "checkpoint",
    "grad_enabled",
    "no_grad",
    "ops",
    "parameter",
]
