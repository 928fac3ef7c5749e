"""Dense, continuous optical flow from a single image plus an event stream."""

__version__ = "0.1.0"

from ._kernels import BACKEND, HAVE_COMPILED
from .events import EventStream, EventVolume, voxelize
from .evalviz import FlowField
from .network import Model, ModelConfig, load_checkpoint, save_checkpoint
from .tensorops import Tensor

__all__ = [
    "BACKEND",
    "HAVE_COMPILED",
    "EventStream",
    "EventVolume",
    "FlowField",
    "Model",
    "ModelConfig",
    "Tensor",
    "load_checkpoint",
    "save_checkpoint",
    "voxelize",
    "__version__",
]
