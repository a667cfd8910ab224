"""StuffNet - object detection with stuff-segmentation context.

A two-branch network (detection and stuff segmentation over a shared trunk)
whose region classifier pools features from both branches, built on a small
reverse-mode autodiff core over numpy.
"""

__version__ = "0.1.0"

from stuffnet.config import ModelSpec, StuffNetConfig, TrainConfig, load_config
from stuffnet.model import Model, build, detect, load_checkpoint, save_checkpoint, segment
from stuffnet.train import hallucinate_labels, train, train_constrained

__all__ = [
    "Model",
    "ModelSpec",
    "StuffNetConfig",
    "TrainConfig",
    "__version__",
    "build",
    "detect",
    "hallucinate_labels",
    "load_checkpoint",
    "load_config",
    "save_checkpoint",
    "segment",
    "train",
    "train_constrained",
]
