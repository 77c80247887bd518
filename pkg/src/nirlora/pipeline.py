"""Glue between a RunConfig, the data on disk and the model checkpoints.

A LoRA run writes ``base.lvwt`` (frozen encoder) and ``adapter.lvwt``; any
other run writes a full ``model.lvwt``. Checkpoint metadata carries the band
selection and the training-split normalisation so prediction needs nothing else.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .archive import ArchiveError, load_archive, save_archive
from .config import RunConfig
from .data import NormStats, SamplePatch, SplitSpec, fit_norm_stats, load_patches, normalize, split, stack
from .head import predict_mask
from .lora import export_adapter, import_adapter, inject, merge_model, read_adapter
from .model import ModelConfig, SegModel, load_model, save_model
from .train import predict_logits
from .vit import load_pretrained


@dataclass
class Dataset:
    train: tuple[np.ndarray, np.ndarray]
    test: tuple[np.ndarray, np.ndarray]
    val: tuple[np.ndarray, np.ndarray]
    stats: NormStats

    def get(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in ("train", "test", "val"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def _arrays(patches, size: int):
    if not patches:
        return np.zeros((0, 3, size, size), np.float32), np.zeros((0, size, size), np.uint8)
    return stack(patches)


def prepare_data(cfg: RunConfig) -> Dataset:
    if cfg["data.dir"] is None:
        raise ValueError("data.dir is not set")
    size = cfg["model.image_size"]
    patches = load_patches(cfg["data.dir"], cfg["data.bands"], size)
    parts = split(patches, SplitSpec(seed=cfg.split_seed))
    stats = fit_norm_stats(parts.train)
    norm = lambda ps: _arrays([normalize(p, stats) for p in ps], size)  # noqa: E731
    return Dataset(norm(parts.train), norm(parts.test), norm(parts.val), stats)


def build_model(cfg: RunConfig) -> SegModel:
    mcfg = cfg.model()
    model = SegModel(mcfg, np.random.default_rng([cfg.seed, 0]))
    if cfg["model.pretrained"]:
        model.encoder = load_pretrained(cfg["model.pretrained"], mcfg.vit)
        if cfg.lora() is None and not cfg["train.freeze_encoder"]:
            model.encoder.set_trainable(True)
    lora = cfg.lora()
    if lora is not None:
        inject(model, lora, np.random.default_rng([cfg.seed, 1]))
    elif cfg["train.freeze_encoder"]:
        model.freeze_encoder()
    return model


def checkpoint_meta(cfg: RunConfig, stats: NormStats) -> dict:
    return {"bands": list(cfg["data.bands"]), "norm": stats.to_dict(), "threshold": cfg["train.threshold"]}


def save_base(model: SegModel, path) -> None:
    tensors = {f"encoder.{n}": p.data for n, p in model.encoder.named_parameters()
               if not (n.endswith("lora_A") or n.endswith("lora_B"))}
    save_archive(path, tensors, {"kind": "base", "config": model.config.to_dict()})


def save_checkpoint(model: SegModel, run_dir: Path, meta: dict) -> Path:
    if model.lora is not None:
        save_base(model, run_dir / "base.lvwt")
        path = run_dir / "adapter.lvwt"
        export_adapter(model, path, meta)
    else:
        path = run_dir / "model.lvwt"
        save_model(model, path, meta)
    return path


def load_base_into(model: SegModel, base_path) -> None:
    tensors, _ = load_archive(base_path)
    expected = {f"encoder.{n}" for n, _ in model.encoder.named_parameters()
                if not (n.endswith("lora_A") or n.endswith("lora_B"))}
    missing = sorted(expected - set(tensors))
    if missing:
        raise ArchiveError(f"{base_path}: missing {missing[:5]}")
    model.load_state_dict({k: tensors[k] for k in expected}, strict=False)
    model.freeze_encoder()


def load_checkpoint(path, base=None) -> tuple[SegModel, dict]:
    """Rebuild a model from a full checkpoint or from an adapter file plus its base."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    _, meta = load_archive(path)
    kind = (meta or {}).get("kind")
    if kind == "full":
        return load_model(path)
    if kind != "adapter":
        raise ArchiveError(f"{path}: archive has no checkpoint metadata")
    base = Path(base) if base else path.with_name("base.lvwt")
    if not base.is_file():
        raise FileNotFoundError(f"base archive not found: {base}")
    _, meta = read_adapter(path)
    model = SegModel(ModelConfig.from_dict(meta["config"]))
    load_base_into(model, base)
    import_adapter(model, path)
    return model, meta


def merge_checkpoint(base, adapter, out) -> SegModel:
    model, meta = load_checkpoint(adapter, base)
    merge_model(model)
    extra = {k: v for k, v in meta.items() if k in ("bands", "norm", "threshold")}
    save_model(model, out, extra)
    return model


def predict_raster(model: SegModel, data: np.ndarray, stats: NormStats | None, threshold: float) -> np.ndarray:
    """Tile an ``H x W x 3`` array at the model resolution and predict each tile.

    Pixels in the trailing strip that does not fill a tile are left 0.
    """
    size = model.config.vit.image_size
    h, w, _ = data.shape
    out = np.zeros((h, w), np.uint8)
    tiles, origins = [], []
    for y in range(0, h - size + 1, size):
        for x in range(0, w - size + 1, size):
            tile = SamplePatch(data[y : y + size, x : x + size].transpose(2, 0, 1), None, ("", y, x))
            if stats is not None:
                tile = normalize(tile, stats)
            tiles.append(tile.image.astype(np.float32))
            origins.append((y, x))
    if not tiles:
        raise ValueError(f"raster {h}x{w} is smaller than one {size}x{size} tile")
    masks = predict_mask(predict_logits(model, np.stack(tiles)), threshold)
    for (y, x), m in zip(origins, masks):
        out[y : y + size, x : x + size] = m
    return out
