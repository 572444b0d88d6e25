"""Minimal reverse-mode autodiff engine on numpy."""

from . import ops
from .core import (
    Function,
    GraphError,
    NumericError,
    Parameter,
    ShapeError,
    Tensor,
    TensorError,
    as_tensor,
    backward,
    default_dtype,
    get_default_dtype,
    grad,
    grad_mode,
    graph_nodes,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
)
from .nn import (
    Conv2d,
    Linear,
    Module,
    PowerIteration,
    RMSProp,
    estimate_sigma,
    param_hash,
    rmsprop_step,
    spectral_normalize,
)
from .gradcheck import (
    InputIndependentWarning,
    check_gradients,
    input_gradient,
    numerical_gradient,
    relative_error,
)

__all__ = [
    "ops",
    "Function",
    "GraphError",
    "NumericError",
    "Parameter",
    "ShapeError",
    "Tensor",
    "TensorError",
    "as_tensor",
    "backward",
    "default_dtype",
    "get_default_dtype",
    "grad",
    "grad_mode",
    "graph_nodes",
    "is_grad_enabled",
    "no_grad",
    "set_default_dtype",
    "Conv2d",
    "Linear",
    "Module",
    "PowerIteration",
    "RMSProp",
    "estimate_sigma",
    "param_hash",
    "rmsprop_step",
    "spectral_normalize",
    "InputIndependentWarning",
    "check_gradients",
    "input_gradient",
    "numerical_gradient",
    "relative_error",
]
