"""Multi-scale anchor detector with channel attention, residual refinement,
and an adversarial domain classifier, on a self-contained float64 autograd
core.  Ships its own synthetic underwater-cast dataset generator, training
loop, VOC-style evaluation, and a verification CLI.
"""

from .network import (
    NetworkSpec,
    build_network,
    count_parameters,
    forward_multiscale,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import Tensor
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "NetworkSpec",
    "Tensor",
    "TrainConfig",
    "build_network",
    "count_parameters",
    "forward_multiscale",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "__version__",
]
