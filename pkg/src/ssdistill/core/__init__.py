from . import gradcheck, optim, rng, tensor
from .rng import RngState
from .tensor import Variable, backward, constant, grad_of, leaf

__all__ = [
    "RngState",
    "Variable",
    "backward",
    "constant",
    "grad_of",
    "leaf",
    "gradcheck",
    "optim",
    "rng",
    "tensor",
]
