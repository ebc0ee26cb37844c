"""Prior-guided convolutional dehazing on a self-contained numpy tensor engine."""

from hazenet.tensor import Tensor, backward, constant, no_grad, parameter

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "constant", "no_grad", "parameter", "__version__"]
