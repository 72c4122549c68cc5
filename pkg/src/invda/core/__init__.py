from .tensor import Tensor, TensorError, as_ndarray
from .tape import GradientTape, TapeError, Var, backward
from .fd import finite_difference_gradient, relative_gradient_error

__all__ = [
    "Tensor",
    "TensorError",
    "as_ndarray",
    "GradientTape",
    "TapeError",
    "Var",
    "backward",
    "finite_difference_gradient",
    "relative_gradient_error",
]
