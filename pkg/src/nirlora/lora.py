"""Low-rank adapters on the query and value projections.

An adapted projection computes ``x @ W + x @ B @ A`` as two summed paths;
``W`` stays frozen and ``B`` starts at zero, so injection leaves the model's
output unchanged until the first update. No ``alpha / r`` scaling is applied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .archive import ArchiveError, load_archive, save_archive
from .autodiff import ShapeError, Tensor
from .head import head_param_count
from .layers import Module
from .model import ModelConfig, SegModel
from .vit import ViTConfig, encoder_param_count

TARGETS = {"query": "q", "value": "v"}


class LoRAError(ValueError):
    pass


class DigestMismatchError(ArchiveError):
    pass


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 4
    targets: tuple[str, ...] = ("query", "value")
    init_std: float = 0.02

    def __post_init__(self):
        targets = tuple(self.targets)
        if not targets:
            raise LoRAError("LoRA needs at least one target projection")
        unknown = set(targets) - set(TARGETS)
        if unknown:
            raise LoRAError(f"unsupported LoRA targets {sorted(unknown)}; only query/value can be adapted")
        if self.rank < 1:
            raise LoRAError(f"rank must be >= 1, got {self.rank}")
        object.__setattr__(self, "targets", targets)

    def to_dict(self) -> dict:
        return {"rank": self.rank, "targets": list(self.targets), "init_std": self.init_std}

    @classmethod
    def from_dict(cls, d: dict) -> "LoRAConfig":
        return cls(rank=d["rank"], targets=tuple(d["targets"]), init_std=d["init_std"])

    def serialize(self) -> str:
        return f"lora.init_std={self.init_std!r}\nlora.rank={self.rank}\nlora.targets={','.join(self.targets)}\n"


class AdapterPair(Module):
    """``A`` is ``r x C_out``, ``B`` is ``C_in x r``; the update is ``B @ A``."""

    def __init__(self, c_in: int, c_out: int, rank: int, rng=None, init_std: float = 0.02,
                 block: int = -1, role: str = ""):
        std = init_std if rng is not None else 0.0
        a = rng.normal(0, std, (rank, c_out)) if rng is not None else np.zeros((rank, c_out))
        self.A = Tensor(a.astype(np.float32), requires_grad=True)
        self.B = Tensor(np.zeros((c_in, rank), np.float32), requires_grad=True)
        self._block = block
        self._role = role

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def delta(self) -> np.ndarray:
        return self.B.data @ self.A.data

    def __call__(self, x: Tensor) -> Tensor:
        return (x @ self.B) @ self.A


def lora_forward(x: Tensor, W: Tensor, pair: AdapterPair) -> Tensor:
    if x.shape[-1] != W.shape[0] or pair.B.shape[0] != W.shape[0] or pair.A.shape[1] != W.shape[1]:
        raise ShapeError(f"lora_forward: x {x.shape}, W {W.shape}, B {pair.B.shape}, A {pair.A.shape}")
    return x @ W + pair(x)


def merge(W, pair: AdapterPair) -> np.ndarray:
    w = W.data if isinstance(W, Tensor) else np.asarray(W)
    return (w + pair.delta()).astype(np.float32)


def adapted_linears(model: SegModel, cfg: LoRAConfig):
    for i, blk in enumerate(model.encoder.blocks):
        for target in cfg.targets:
            yield i, target, getattr(blk.attn, TARGETS[target])


def inject(model: SegModel, cfg: LoRAConfig, rng: np.random.Generator | None = None) -> SegModel:
    """Attach adapters in place, freeze the encoder base, keep the head trainable."""
    if model.lora is not None or any(n.endswith("lora_A") for n, _ in model.named_parameters()):
        raise LoRAError("model already carries LoRA adapters")
    for block, target, lin in adapted_linears(model, cfg):
        bound = min(lin.c_in, lin.c_out)
        if cfg.rank > bound:
            raise LoRAError(f"rank {cfg.rank} exceeds min(C_in, C_out) = {bound} (block {block} {target})")
    for block, target, lin in adapted_linears(model, cfg):
        lin.adapter = AdapterPair(lin.c_in, lin.c_out, cfg.rank, rng, cfg.init_std, block, target)
    model.freeze_encoder()
    model.head.set_trainable(True)
    model._lora = cfg
    return model


def merge_model(model: SegModel) -> SegModel:
    """Fold every ``B @ A`` into its base weight and drop the adapters, in place."""
    if model.lora is None:
        return model
    for _, _, lin in adapted_linears(model, model.lora):
        lin.weight.data = merge(lin.weight, lin.adapter)
        lin.adapter = None
    model._lora = None
    return model


@dataclass(frozen=True)
class ParamCount:
    total: int
    trainable: int
    frozen: int
    by_module: dict

    @property
    def trainable_fraction(self) -> float:
        return self.trainable / self.total

    @property
    def reduction(self) -> float:
        """Share of the total that is frozen."""
        return 1.0 - self.trainable_fraction


def _module_of(name: str) -> str:
    if name.endswith("lora_A") or name.endswith("lora_B"):
        return "adapters"
    return name.split(".", 1)[0]


def count_params(model: SegModel) -> ParamCount:
    total = trainable = 0
    by_module: dict[str, int] = {}
    for name, p in model.named_parameters():
        total += p.size
        if p.requires_grad:
            trainable += p.size
        key = _module_of(name)
        by_module[key] = by_module.get(key, 0) + p.size
    return ParamCount(total, trainable, total - trainable, by_module)


def adapter_param_count(vit: ViTConfig, cfg: LoRAConfig) -> int:
    d = vit.hidden
    return vit.layers * len(cfg.targets) * 2 * d * cfg.rank


def predict_param_count(cfg: ModelConfig, lora: LoRAConfig | None = None) -> ParamCount:
    """Closed-form counterpart of :func:`count_params` for an untrained model."""
    enc = encoder_param_count(cfg.vit)
    head = head_param_count(cfg.head)
    by_module = {"encoder": enc, "head": head}
    if lora is None:
        return ParamCount(enc + head, enc + head, 0, by_module)
    adapters = adapter_param_count(cfg.vit, lora)
    by_module["adapters"] = adapters
    return ParamCount(enc + head + adapters, head + adapters, enc, by_module)


def adapter_state(model: SegModel) -> dict[str, np.ndarray]:
    return {n: p.data for n, p in model.named_parameters() if _module_of(n) in ("adapters", "head")}


def export_adapter(model: SegModel, path, extra_meta: dict | None = None) -> None:
    if model.lora is None:
        raise LoRAError("model has no adapters to export")
    meta = {
        "kind": "adapter",
        "lora": model.lora.to_dict(),
        "config": model.config.to_dict(),
        "digest": model.digest(),
    }
    meta.update(extra_meta or {})
    save_archive(path, adapter_state(model), meta)


def read_adapter(path) -> tuple[dict[str, np.ndarray], dict]:
    tensors, meta = load_archive(path)
    if not meta or meta.get("kind") != "adapter":
        raise ArchiveError(f"{path}: not an adapter file")
    return tensors, meta


def import_adapter(model: SegModel, path, rng: np.random.Generator | None = None) -> dict:
    """Load adapters and head weights onto ``model``.

    A model without adapters is injected with the file's LoRA config first.
    Returns the file's metadata.
    """
    tensors, meta = read_adapter(path)
    if model.lora is None:
        if model.config.serialize() != ModelConfig.from_dict(meta["config"]).serialize():
            raise DigestMismatchError(f"{path}: base config differs from the model it is applied to")
        inject(model, LoRAConfig.from_dict(meta["lora"]), rng)
    if model.digest() != meta["digest"]:
        raise DigestMismatchError(
            f"{path}: config digest {meta['digest']} does not match model digest {model.digest()}"
        )
    expected = adapter_state(model)
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise ArchiveError(f"{path}: missing adapter tensors {missing[:5]}")
    model.load_state_dict(tensors, strict=False)
    return meta
