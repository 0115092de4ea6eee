"""ssdistill: distill an unlabeled dataset into a small synthetic set.

The synthetic set is optimized so that a kernel ridge regression built on a
partially trained feature extractor reproduces a frozen self-supervised
target model on the real data. The package provides the numeric core
(tape-based autodiff over numpy), the models, the self-supervised target
training, the distillation loop, transfer evaluation, and a small exactly
solvable problem that exhibits the gradient bias the kernel route avoids.
"""

from .core import RngState, Variable, backward, constant, leaf

__version__ = "0.1.0"

__all__ = ["RngState", "Variable", "backward", "constant", "leaf", "__version__"]
