"""Encoder + optional adapters + ASPP head, with a frozen/trainable registry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .archive import ArchiveError, fnv1a64, load_archive, save_archive
from .autodiff import GradTape, Tensor
from .head import ASPPHead, HeadConfig, tokens_to_grid
from .layers import Module
from .vit import ViTConfig, ViTEncoder


@dataclass(frozen=True)
class ModelConfig:
    vit: ViTConfig
    head_width: int = 256
    atrous_rates: tuple[int, ...] = (12, 24, 36)

    @property
    def head(self) -> HeadConfig:
        return HeadConfig(in_dim=self.vit.hidden, width=self.head_width, atrous_rates=self.atrous_rates)

    def to_dict(self) -> dict:
        return {"vit": self.vit.to_dict(), "head_width": self.head_width, "atrous_rates": list(self.atrous_rates)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(vit=ViTConfig(**d["vit"]), head_width=d["head_width"], atrous_rates=tuple(d["atrous_rates"]))

    def serialize(self) -> str:
        """Canonical ``key=value`` lines; this is what digests are taken over."""
        items = {f"vit.{k}": v for k, v in self.vit.to_dict().items()}
        items["head.width"] = self.head_width
        items["head.atrous_rates"] = ",".join(map(str, self.atrous_rates))
        return "".join(f"{k}={items[k]}\n" for k in sorted(items))


class SegModel(Module):
    """Full segmentation network.

    ``rng=None`` builds an all-zero model, which is how the large presets are
    instantiated for parameter counting.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        self.encoder = ViTEncoder(cfg.vit, rng)
        self.head = ASPPHead(cfg.head, rng)
        self._cfg = cfg
        self._tape = GradTape()
        self._lora = None

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def lora(self):
        return self._lora

    @property
    def tape(self) -> GradTape:
        return self._tape

    def __call__(self, images) -> Tensor:
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=np.float32))
        with self._tape.active():
            z = self.encoder(images)
            size = images.shape[-2:]
            return self.head(tokens_to_grid(z), size)

    forward = __call__

    def freeze_encoder(self) -> None:
        """Freeze every encoder tensor except LoRA adapters."""
        for name, p in self.encoder.named_parameters():
            if not (name.endswith("lora_A") or name.endswith("lora_B")):
                p.requires_grad = False
                p.grad = None

    def trainable(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    def frozen(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters() if not p.requires_grad}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, tensors: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(tensors))
            extra = sorted(set(tensors) - set(params))
            if missing or extra:
                raise ArchiveError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in tensors.items():
            if name not in params:
                continue
            if arr.shape != params[name].shape:
                raise ArchiveError(f"{name}: shape {arr.shape}, expected {params[name].shape}")
        for name, arr in tensors.items():
            if name in params:
                params[name].data = np.array(arr, dtype=np.float32)

    def digest(self) -> str:
        text = self._cfg.serialize()
        if self._lora is not None:
            text += self._lora.serialize()
        return f"{fnv1a64(text.encode('utf-8')):016x}"


def save_model(model: SegModel, path, extra_meta: dict | None = None) -> None:
    """Full LVWT checkpoint; adapters are not allowed here, merge them first."""
    if model.lora is not None:
        raise ValueError("model still carries adapters; merge or export_adapter instead")
    meta = {"kind": "full", "config": model.config.to_dict(), "digest": model.digest()}
    meta.update(extra_meta or {})
    save_archive(path, model.state_dict(), meta)


def load_model(path) -> tuple[SegModel, dict]:
    tensors, meta = load_archive(path)
    if not meta or meta.get("kind") != "full":
        raise ArchiveError(f"{path}: not a full model checkpoint")
    model = SegModel(ModelConfig.from_dict(meta["config"]))
    model.load_state_dict(tensors)
    return model, meta
