"""ViT backbone: patch embedding, pre-norm transformer blocks, final norm.

There is no class token; all ``N = HW / P^2`` patch tokens go to the head.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .archive import ArchiveError, load_archive
from .autodiff import ShapeError, Tensor
from .layers import LayerNorm, Linear, Module

log = logging.getLogger(__name__)

ATTENTION_SCALES = ("per_head", "global_D")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ViTConfig:
    patch_size: int
    layers: int
    hidden: int
    mlp_dim: int
    heads: int
    in_channels: int = 3
    image_size: int = 224
    # per_head divides scores by sqrt(D / heads); global_D by sqrt(D)
    attention_scale: str = "per_head"

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.attention_scale not in ATTENTION_SCALES:
            raise ConfigError(f"attention_scale must be one of {ATTENTION_SCALES}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid**2

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


# (patch, layers, hidden, mlp, heads)
PRESETS: dict[str, tuple[int, int, int, int, int]] = {
    "B_16": (16, 12, 768, 3072, 12),
    "B_32": (32, 12, 768, 3072, 12),
    "L_16": (16, 24, 1024, 4096, 16),
    "L_32": (32, 24, 1024, 4096, 16),
}


def preset(name: str, **overrides) -> ViTConfig:
    try:
        p, layers, hidden, mlp, heads = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown backbone {name!r}; choose from {sorted(PRESETS)}") from None
    base = dict(patch_size=p, layers=layers, hidden=hidden, mlp_dim=mlp, heads=heads)
    base.update(overrides)
    return ViTConfig(**base)


def encoder_param_count(cfg: ViTConfig) -> int:
    d, m = cfg.hidden, cfg.mlp_dim
    embed = d * cfg.patch_size**2 * cfg.in_channels + d + cfg.num_tokens * d
    block = 4 * (d * d + d) + 2 * 2 * d + (d * m + m) + (m * d + d)
    return embed + cfg.layers * block + 2 * d


class PatchEmbed(Module):
    def __init__(self, cfg: ViTConfig, rng=None):
        fan_in = cfg.patch_size**2 * cfg.in_channels
        # D x (P^2 C), applied as patches @ weight^T
        self.weight = _normal((cfg.hidden, fan_in), rng)
        self.bias = Tensor(np.zeros(cfg.hidden, np.float32), requires_grad=True)
        self.pos = _normal((cfg.num_tokens, cfg.hidden), rng)
        self._cfg = cfg

    def __call__(self, images: Tensor) -> Tensor:
        return patch_embed(images, self.weight, self.pos, self._cfg.patch_size, self.bias)


def _normal(shape, rng, std: float = 0.02) -> Tensor:
    data = rng.normal(0, std, shape).astype(np.float32) if rng is not None else np.zeros(shape, np.float32)
    return Tensor(data, requires_grad=True)


def patch_embed(images: Tensor, E: Tensor, E_pos: Tensor, patch_size: int, bias: Tensor | None = None) -> Tensor:
    """Flatten row-major P x P patches (channel-major inside a patch), project, add positions.

    ``images`` is ``C x H x W`` or ``B x C x H x W``; the result is ``N x D`` or ``B x N x D``.
    """
    squeeze = images.ndim == 3
    x = images.reshape((1,) + images.shape) if squeeze else images
    b, c, h, w = x.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    n = gh * gw
    if E_pos.shape[0] != n:
        raise ConfigError(f"{n} patches but positional table has {E_pos.shape[0]} rows")
    if E.shape[1] != c * p * p:
        raise ShapeError(f"projection expects {E.shape[1]} inputs, patch has {c * p * p}")
    patches = x.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, n, c * p * p)
    z = patches @ E.transpose(1, 0)
    if bias is not None:
        z = z + bias
    z = z + E_pos
    return z.reshape(n, E.shape[0]) if squeeze else z


class Attention(Module):
    def __init__(self, cfg: ViTConfig, rng=None):
        d = cfg.hidden
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self._heads = cfg.heads
        self._scale = cfg.head_dim if cfg.attention_scale == "per_head" else d

    def __call__(self, z: Tensor) -> Tensor:
        return mha(z, self, self._heads, self._scale)


def attention_weights(q: Tensor, k: Tensor, scale: float) -> Tensor:
    return ad.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(scale)), axis=-1)


def mha(z: Tensor, attn: Attention, heads: int, scale_dim: int | None = None) -> Tensor:
    """Multi-head self attention on ``B x N x D`` (or ``N x D``) tokens.

    Scores are divided by ``sqrt(scale_dim)``; the default is the per-head width.
    """
    squeeze = z.ndim == 2
    x = z.reshape((1,) + z.shape) if squeeze else z
    b, n, d = x.shape
    if d % heads:
        raise ShapeError(f"hidden {d} not divisible by {heads} heads")
    dh = d // heads
    scale_dim = dh if scale_dim is None else scale_dim

    def split(t: Tensor) -> Tensor:
        return t.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

    q, k, v = split(attn.q(x)), split(attn.k(x)), split(attn.v(x))
    ctx = attention_weights(q, k, scale_dim) @ v
    out = attn.out(ctx.transpose(0, 2, 1, 3).reshape(b, n, d))
    return out.reshape(n, d) if squeeze else out


class MLP(Module):
    def __init__(self, cfg: ViTConfig, rng=None):
        self.fc1 = Linear(cfg.hidden, cfg.mlp_dim, rng)
        self.fc2 = Linear(cfg.mlp_dim, cfg.hidden, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class Block(Module):
    def __init__(self, cfg: ViTConfig, rng=None):
        self.norm1 = LayerNorm(cfg.hidden)
        self.attn = Attention(cfg, rng)
        self.norm2 = LayerNorm(cfg.hidden)
        self.mlp = MLP(cfg, rng)

    def __call__(self, z: Tensor) -> Tensor:
        z = self.attn(self.norm1(z)) + z
        return self.mlp(self.norm2(z)) + z


class ViTEncoder(Module):
    """Patch embedding, ``layers`` transformer blocks, final layer norm.

    With ``rng=None`` every matrix is zero; that is cheap for the large presets
    since the pages are never touched until used.
    """

    def __init__(self, cfg: ViTConfig, rng: np.random.Generator | None = None):
        self.embed = PatchEmbed(cfg, rng)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.layers)]
        self.norm = LayerNorm(cfg.hidden)
        self._cfg = cfg

    @property
    def config(self) -> ViTConfig:
        return self._cfg

    def __call__(self, images: Tensor) -> Tensor:
        z = self.embed(images)
        for blk in self.blocks:
            z = blk(z)
        return self.norm(z)

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


def encode(images: Tensor, encoder: ViTEncoder) -> Tensor:
    return encoder(images)


CLS_NAME = "embed.cls"


def load_pretrained(path, cfg: ViTConfig) -> ViTEncoder:
    """Build a frozen encoder from an LVWT archive.

    Names may carry an ``encoder.`` prefix. A class-token entry and the extra
    positional row that goes with it are dropped.
    """
    tensors, _ = load_archive(path)
    found = {}
    for name, arr in tensors.items():
        if name.startswith("encoder."):
            found[name[len("encoder.") :]] = arr
        elif not name.startswith("head."):
            found[name] = arr
    enc = ViTEncoder(cfg)
    expected = dict(enc.named_parameters())
    if CLS_NAME in found:
        found.pop(CLS_NAME)
        pos = found.get("embed.pos")
        if pos is not None and pos.shape[0] == cfg.num_tokens + 1:
            found["embed.pos"] = pos[1:]
        log.warning("%s: dropped class token and its positional embedding", path)
    elif "embed.pos" in found and found["embed.pos"].shape[0] == cfg.num_tokens + 1:
        found["embed.pos"] = found["embed.pos"][1:]
        log.warning("%s: dropped class-token positional row", path)
    for name, param in expected.items():
        if name not in found:
            raise ArchiveError(f"{path}: missing tensor encoder.{name}")
        if found[name].shape != param.shape:
            raise ArchiveError(f"{path}: encoder.{name} has shape {found[name].shape}, expected {param.shape}")
    for name, param in expected.items():
        param.data = np.ascontiguousarray(found[name], dtype=np.float32)
    enc.set_trainable(False)
    return enc
