from .tensor import (DEFAULT_DTYPE, GraphError, NonFiniteError, Tensor, as_tensor, deterministic,
                     grad_enabled, no_grad, set_deterministic)
from . import ops
from .nn import Module, Parameter

__all__ = [
    "DEFAULT_DTYPE", "GraphError", "Module", "NonFiniteError", "Parameter", "Tensor", "as_tensor",
    "deterministic", "grad_enabled", "no_grad", "ops", "set_deterministic",
]
