"""Desk-scale experiment on synthetic NIR scenes: LoRA + head versus head only.

Both arms start from the same randomly initialised, frozen encoder and the
same head weights; the only difference is whether query/value adapters are
attached and trained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import NIR_BANDS, SplitSpec, fit_norm_stats, gen_synthetic, normalize, patchify, select_bands, split, stack
from .lora import LoRAConfig, inject
from .model import ModelConfig, SegModel
from .train import TrainConfig, evaluate, train
from .vit import ViTConfig

# 4-pixel patches give an 8x8 token grid on 32x32 inputs
DESK_VIT = ViTConfig(patch_size=4, layers=2, hidden=32, mlp_dim=64, heads=2, image_size=32)
DESK_MODEL = ModelConfig(DESK_VIT, head_width=16)


@dataclass
class Arrays:
    train: tuple[np.ndarray, np.ndarray]
    test: tuple[np.ndarray, np.ndarray]


def synthetic_patches(n_patches: int, seed: int, size: int = 32, bands=NIR_BANDS):
    """Generate scenes of ``2 size x 2 size`` pixels and tile them into ``n_patches`` patches."""
    scenes = -(-n_patches // 4)
    patches = []
    for i, (img, mask) in enumerate(gen_synthetic(scenes, seed, 2 * size, 2 * size)):
        patches += patchify(select_bands(img, bands), mask, size, raster_id=str(i))
    return patches[:n_patches]


def prepare(n_patches: int, seed: int, split_seed: int | None = None) -> Arrays:
    parts = split(synthetic_patches(n_patches, seed), SplitSpec(seed=seed if split_seed is None else split_seed))
    train_patches = parts.train + parts.val
    stats = fit_norm_stats(train_patches)
    norm = lambda ps: stack([normalize(p, stats) for p in ps])  # noqa: E731
    return Arrays(norm(train_patches), norm(parts.test))


def build(seed: int, use_lora: bool, cfg: ModelConfig = DESK_MODEL, rank: int = 4) -> SegModel:
    model = SegModel(cfg, np.random.default_rng([seed, 0]))
    if use_lora:
        inject(model, LoRAConfig(rank=rank), np.random.default_rng([seed, 1]))
    else:
        model.freeze_encoder()
    return model


@dataclass
class ArmResult:
    name: str
    trainable: int
    train_iou: float
    test_iou: float
    test_f1: float


def compare(data: Arrays, seed: int, tcfg: TrainConfig) -> list[ArmResult]:
    out = []
    for name, use_lora in (("head-only", False), ("lora+head", True)):
        model = build(seed, use_lora)
        train(model, data.train, tcfg)
        tr = evaluate(model, *data.train, threshold=tcfg.threshold)
        te = evaluate(model, *data.test, threshold=tcfg.threshold)
        n_train = sum(p.size for p in model.trainable().values())
        out.append(ArmResult(name, n_train, tr.mean["iou"], te.mean["iou"], te.mean["f1"]))
    return out
