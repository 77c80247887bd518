"""Total and trainable parameter counts for every preset, with and without LoRA.

    python3 scripts/param_table.py --width 256 --ranks 1 4 16
"""

import argparse

from nirlora.lora import LoRAConfig, predict_param_count
from nirlora.model import ModelConfig
from nirlora.vit import PRESETS, preset

# published trainable counts in millions (full, LoRA) for comparison
REFERENCE = {"B_16": (91.49, 5.84), "L_16": (310.66, 7.75)}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--width", type=int, default=256, help="ASPP head width")
    ap.add_argument("--ranks", type=int, nargs="+", default=[4])
    args = ap.parse_args()

    print(f"{'backbone':<9}{'setting':<10}{'total(M)':>10}{'train(M)':>10}{'fraction':>10}{'reference(M)':>14}")
    for name in sorted(PRESETS):
        cfg = ModelConfig(preset(name), head_width=args.width)
        ref = REFERENCE.get(name, (None, None))
        full = predict_param_count(cfg)
        rows = [("full", full, ref[0])]
        rows += [(f"lora r={r}", predict_param_count(cfg, LoRAConfig(rank=r)), ref[1] if r == 4 else None) for r in args.ranks]
        for label, c, r in rows:
            ref_txt = f"{r:.2f}" if r is not None else "-"
            print(f"{name:<9}{label:<10}{c.total / 1e6:>10.2f}{c.trainable / 1e6:>10.2f}{c.trainable_fraction:>10.4f}{ref_txt:>14}")


if __name__ == "__main__":
    main()
