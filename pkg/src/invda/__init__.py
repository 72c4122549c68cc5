"""Variational data assimilation with a learned inverse observation operator.

Differentiable Lorenz96 and 2d Kolmogorov-flow simulators, subsampled
observations, a fully-convolutional inverse observation operator used both
to initialize and to reformulate the assimilation objective, and an
evaluation harness comparing the optimization variants.
"""

from .kernels import BACKEND as kernel_backend

__version__ = "0.1.0"
__all__ = ["kernel_backend", "__version__"]
