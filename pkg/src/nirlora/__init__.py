"""LoRA-adapted ViT encoder with an ASPP head for binary segmentation of multispectral patches."""

from .autodiff import Tensor, backward, no_grad
from .lora import LoRAConfig, count_params, inject, merge_model
from .model import ModelConfig, SegModel
from .train import TrainConfig, evaluate, train
from .vit import PRESETS, ViTConfig, preset

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "LoRAConfig",
    "count_params",
    "inject",
    "merge_model",
    "ModelConfig",
    "SegModel",
    "TrainConfig",
    "evaluate",
    "train",
    "PRESETS",
    "ViTConfig",
    "preset",
]
