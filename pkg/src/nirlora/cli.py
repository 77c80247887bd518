"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .archive import ArchiveError
from .config import RunConfig, load_config, validate
from .data import NormStats, Raster, RasterError, load_raster, select_bands, write_raster, write_synthetic
from .lora import DigestMismatchError, LoRAConfig, LoRAError, count_params, inject
from .model import SegModel
from .pipeline import (
    build_model,
    checkpoint_meta,
    load_checkpoint,
    merge_checkpoint,
    predict_raster,
    prepare_data,
    save_checkpoint,
)
from .train import TrainingError, evaluate, train
from .vit import ConfigError

log = logging.getLogger("nirlora")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _bands(s: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bands must be comma-separated integers, got {s!r}") from None


def _config(args) -> RunConfig:
    cfg = load_config(args.config).override(
        **{
            "seed": getattr(args, "seed", None),
            "out": getattr(args, "out", None),
            "train.threshold": getattr(args, "threshold", None),
            "data.bands": getattr(args, "bands", None),
        }
    )
    validate(cfg, str(args.config))
    return cfg


def _new_run_dir(root: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run_dir = Path(root) / f"run-{stamp}"
    i = 1
    while run_dir.exists():
        run_dir = Path(root) / f"run-{stamp}-{i}"
        i += 1
    run_dir.mkdir(parents=True)
    return run_dir


def cmd_train(args) -> int:
    cfg = _config(args)
    data = prepare_data(cfg)
    model = build_model(cfg)
    run_dir = _new_run_dir(cfg["out"])
    (run_dir / "config.cfg").write_text(cfg.source_text)
    (run_dir / "resolved.cfg").write_text(cfg.resolved_text())
    val = data.val if len(data.val[0]) else None
    with open(run_dir / "log.tsv", "w") as fh:
        result = train(model, data.train, cfg.train(), val, on_epoch=lambda e: fh.write(e.line() + "\n"))
    model.load_state_dict(result.best_state, strict=False)
    ckpt = save_checkpoint(model, run_dir, checkpoint_meta(cfg, data.stats))
    split_name = "test" if len(data.test[0]) else "train"
    report = evaluate(model, *data.get(split_name), threshold=cfg["train.threshold"])
    text = report.format()
    (run_dir / "metrics.txt").write_text(f"{split_name}\n{text}\n")
    print(f"run directory: {run_dir}")
    print(f"checkpoint: {ckpt}")
    print(f"{split_name} split:")
    print(text)
    return EXIT_OK


def _config_digest(cfg: RunConfig) -> str:
    model = SegModel(cfg.model())
    lora = cfg.lora()
    if lora is not None:
        inject(model, lora)
    return model.digest()


def cmd_eval(args) -> int:
    cfg = _config(args)
    model, meta = load_checkpoint(args.checkpoint, args.base)
    if meta.get("kind") == "adapter" and meta["digest"] != _config_digest(cfg):
        raise DigestMismatchError(
            f"checkpoint {args.checkpoint} (digest {meta['digest']}) was not produced by config {args.config}"
        )
    if meta.get("kind") == "full" and model.config.serialize() != cfg.model().serialize():
        raise DigestMismatchError(f"checkpoint {args.checkpoint} does not match the model in {args.config}")
    data = prepare_data(cfg)
    images, masks = data.get(args.split)
    if len(images) == 0:
        raise ValueError(f"split {args.split!r} is empty")
    report = evaluate(model, images, masks, threshold=cfg["train.threshold"])
    print(report.format())
    return EXIT_OK


def _count_rows(cfg: RunConfig) -> list[tuple[str, object]]:
    mcfg = cfg.model()
    rows = [("full", count_params(SegModel(mcfg)))]
    lora = cfg.lora() or LoRAConfig(cfg["lora.r"], cfg["lora.targets"], cfg["lora.init_std"])
    rows.append((f"lora r={lora.rank}", count_params(inject(SegModel(mcfg), lora))))
    return rows


def cmd_count_params(args) -> int:
    cfg = _config(args)
    rows = _count_rows(cfg)
    full_trainable = rows[0][1].trainable
    print(f"backbone {cfg['model.backbone']}, head width {cfg['head.width']}")
    print(f"{'model':<12}{'total':>14}{'trainable':>14}{'frozen':>14}{'total(M)':>10}{'train(M)':>10}{'reduction':>11}")
    for label, c in rows:
        reduction = 100.0 * (1.0 - c.trainable / full_trainable)
        print(
            f"{label:<12}{c.total:>14d}{c.trainable:>14d}{c.frozen:>14d}"
            f"{c.total / 1e6:>10.2f}{c.trainable / 1e6:>10.2f}{reduction:>10.2f}%"
        )
    return EXIT_OK


def cmd_merge(args) -> int:
    merge_checkpoint(args.base_archive, args.adapter_file, args.out_archive)
    print(f"merged model written to {args.out_archive}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, meta = load_checkpoint(args.checkpoint, args.base)
    raster = load_raster(args.raster)
    bands = args.bands or tuple(meta.get("bands", (0, 1, 2)))
    if raster.bands != 3 or args.bands:
        raster = select_bands(raster, bands)
    stats = NormStats.from_dict(meta["norm"]) if "norm" in meta else None
    threshold = args.threshold if args.threshold is not None else meta.get("threshold", 0.5)
    mask = predict_raster(model, raster.data, stats, threshold)
    write_raster(args.out_mask, Raster(mask[:, :, None]))
    print(f"mask written to {args.out_mask} ({int(mask.sum())} positive pixels)")
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    written = write_synthetic(args.out, args.n, args.seed, args.size, args.size)
    print(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nirlora", description="LoRA-adapted ViT + ASPP binary segmentation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True, type=Path)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--bands", type=_bands)
    t.add_argument("--threshold", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--config", required=True, type=Path)
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--base", type=Path, help="base archive for adapter checkpoints")
    e.add_argument("--split", default="test", choices=("train", "test", "val"))
    e.add_argument("--seed", type=int)
    e.add_argument("--bands", type=_bands)
    e.add_argument("--threshold", type=float)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("count-params", help="print total/trainable/frozen parameter counts")
    c.add_argument("--config", required=True, type=Path)
    c.set_defaults(func=cmd_count_params)

    m = sub.add_parser("merge", help="fold an adapter file into its base archive")
    m.add_argument("base_archive", type=Path)
    m.add_argument("adapter_file", type=Path)
    m.add_argument("out_archive", type=Path)
    m.set_defaults(func=cmd_merge)

    pr = sub.add_parser("predict", help="write a binary mask for a raster")
    pr.add_argument("--checkpoint", required=True, type=Path)
    pr.add_argument("--base", type=Path)
    pr.add_argument("--bands", type=_bands)
    pr.add_argument("--threshold", type=float)
    pr.add_argument("raster", type=Path)
    pr.add_argument("out_mask", type=Path)
    pr.set_defaults(func=cmd_predict)

    g = sub.add_parser("gen-synth", help="write synthetic raster/mask pairs")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=224)
    g.add_argument("--out", required=True, type=Path)
    g.set_defaults(func=cmd_gen_synth)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"nirlora: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DigestMismatchError, LoRAError) as exc:
        print(f"nirlora: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, RasterError, ArchiveError, TrainingError, ValueError, OSError) as exc:
        print(f"nirlora: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
