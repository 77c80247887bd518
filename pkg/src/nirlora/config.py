"""Line-oriented ``key = value`` run configuration.

Keys are dotted (``lora.r = 4``); ``#`` starts a comment; unknown keys are an
error. Every key and its default is listed in ``SCHEMA``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .lora import LoRAConfig
from .model import ModelConfig
from .train import TrainConfig
from .vit import PRESETS, ConfigError, ViTConfig, preset

# tiny desk-scale backbone: (patch, layers, hidden, mlp, heads)
DESK_PRESETS = {"tiny": (16, 2, 32, 64, 2)}


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _strs(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _opt_int(s: str) -> int | None:
    return None if s.strip().lower() in ("", "none") else int(s)


def _opt_str(s: str) -> str | None:
    return None if s.strip().lower() in ("", "none") else s.strip()


SCHEMA: dict[str, tuple] = {
    "model.backbone": (str, "B_16"),
    "model.patch_size": (_opt_int, None),
    "model.layers": (_opt_int, None),
    "model.hidden": (_opt_int, None),
    "model.mlp_dim": (_opt_int, None),
    "model.heads": (_opt_int, None),
    "model.image_size": (int, 224),
    "model.attention_scale": (str, "per_head"),
    "model.pretrained": (_opt_str, None),
    "head.width": (int, 256),
    "head.atrous_rates": (_ints, (12, 24, 36)),
    "lora.enabled": (_bool, True),
    "lora.r": (int, 4),
    "lora.targets": (_strs, ("query", "value")),
    "lora.init_std": (float, 0.02),
    "data.dir": (_opt_str, None),
    "data.bands": (_ints, (0, 1, 2)),
    "data.split_seed": (_opt_int, None),
    "train.epochs": (int, 70),
    "train.batch_size": (int, 8),
    "train.lr": (float, 1e-4),
    "train.decay_factor": (float, 0.91),
    "train.decay_every": (int, 5),
    "train.decay_unit": (str, "epoch"),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.eps": (float, 1e-8),
    "train.threshold": (float, 0.5),
    "train.freeze_encoder": (_bool, False),
    "seed": (int, 0),
    "out": (str, "runs"),
}


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(map(str, v))
    return str(v)


@dataclass
class RunConfig:
    values: dict
    source_text: str = ""

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def split_seed(self) -> int:
        s = self.values["data.split_seed"]
        return self.seed if s is None else s

    def vit(self) -> ViTConfig:
        name = self["model.backbone"]
        overrides = {
            k: self[f"model.{k}"]
            for k in ("patch_size", "layers", "hidden", "mlp_dim", "heads")
            if self[f"model.{k}"] is not None
        }
        overrides["image_size"] = self["model.image_size"]
        overrides["attention_scale"] = self["model.attention_scale"]
        if name in DESK_PRESETS:
            p, layers, hidden, mlp, heads = DESK_PRESETS[name]
            base = dict(patch_size=p, layers=layers, hidden=hidden, mlp_dim=mlp, heads=heads)
            base.update(overrides)
            return ViTConfig(**base)
        if name not in PRESETS:
            raise ConfigError(f"unknown backbone {name!r}; choose from {sorted(PRESETS) + sorted(DESK_PRESETS)}")
        return preset(name, **overrides)

    def model(self) -> ModelConfig:
        return ModelConfig(self.vit(), self["head.width"], self["head.atrous_rates"])

    def lora(self) -> LoRAConfig | None:
        if not self["lora.enabled"]:
            return None
        return LoRAConfig(self["lora.r"], self["lora.targets"], self["lora.init_std"])

    def train(self) -> TrainConfig:
        return TrainConfig(
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            lr=self["train.lr"],
            decay_factor=self["train.decay_factor"],
            decay_every=self["train.decay_every"],
            decay_unit=self["train.decay_unit"],
            beta1=self["train.beta1"],
            beta2=self["train.beta2"],
            eps=self["train.eps"],
            threshold=self["train.threshold"],
            seed=self.seed,
        )

    def resolved_text(self) -> str:
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in SCHEMA)

    def override(self, **kv) -> "RunConfig":
        vals = dict(self.values)
        for k, v in kv.items():
            if v is not None:
                vals[k] = v
        return RunConfig(vals, self.source_text)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = {k: default for k, (_, default) in SCHEMA.items()}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            values[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    cfg = RunConfig(values, text)
    validate(cfg, source)
    return cfg


def validate(cfg: RunConfig, source: str = "<config>") -> None:
    """Build every sub-config once so inconsistent settings fail early."""
    try:
        cfg.model()
        cfg.lora()
        cfg.train()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))
