"""Region-based quality estimation for video re-identification at desk scale."""

from .autodiff import ParamStore, ShapeError, Tensor, backward
from .model import RQEN, BackboneConfig
from .regions import DEFAULT_LAYOUT, RegionLayout
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "DEFAULT_LAYOUT",
    "ParamStore",
    "RQEN",
    "RegionLayout",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "backward",
    "train",
]
