"""Two-scale vision transformer with attention-rollout crop proposals, on a small numpy autograd."""

from .dppm import EmptyMask, PatchComponent, PatchMask, PixelRegion, propose
from .model import RamsModel, forward_two_scale, predict
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, evaluate, train
from .vit import ModelConfig

__all__ = [
    "EmptyMask",
    "ModelConfig",
    "PatchComponent",
    "PatchMask",
    "PixelRegion",
    "RamsModel",
    "Tensor",
    "TrainConfig",
    "backward",
    "evaluate",
    "forward_two_scale",
    "no_grad",
    "predict",
    "propose",
    "train",
]
