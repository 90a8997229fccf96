"""Desk-scale speech-to-text translation with cross-modal multi-task training."""

from ._backend import BACKEND as KERNEL_BACKEND
from .autodiff import Tape, Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND",
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "no_grad",
    "__version__",
]
