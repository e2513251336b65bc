"""Compressed-sensing MRI reconstruction with a learned autoregressive prior."""

__version__ = "0.1.0"

from .errors import FormatError, NumericalError, ReconError, ShapeError, ValidationError
from .mixture import Discretization, MixtureParams
from .encoding import EncodingOperator, SamplingMask, Trajectory
from .prior import PriorNet, Topology
from .recon import ConvergenceLog, ReconConfig, cg_sense, map_reconstruct, zero_filled
from .training import TrainConfig, train

__all__ = [
    "ConvergenceLog", "Discretization", "EncodingOperator", "FormatError",
    "MixtureParams", "NumericalError", "PriorNet", "ReconConfig", "ReconError",
    "SamplingMask", "ShapeError", "Topology", "TrainConfig", "Trajectory",
    "ValidationError", "cg_sense", "map_reconstruct", "train", "zero_filled",
]
