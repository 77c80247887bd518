"""LoRA + head versus head only on synthetic NIR patches, over several seeds.

    python3 scripts/desk_experiment.py --patches 64 --epochs 70 --seeds 0 1 2
"""

import argparse
import statistics

from nirlora.desk import compare, prepare
from nirlora.train import TrainConfig


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--patches", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=70)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()

    by_arm: dict[str, list[float]] = {}
    print("seed\tarm\ttrainable\ttrain_IoU\ttest_IoU\ttest_F1")
    for seed in args.seeds:
        data = prepare(args.patches, seed)
        for r in compare(data, seed, TrainConfig(epochs=args.epochs, lr=args.lr, seed=seed)):
            print(f"{seed}\t{r.name}\t{r.trainable}\t{r.train_iou:.3f}\t{r.test_iou:.3f}\t{r.test_f1:.3f}")
            by_arm.setdefault(r.name, []).append(r.test_iou)
    for name, vals in by_arm.items():
        sd = statistics.pstdev(vals) if len(vals) > 1 else 0.0
        print(f"{name}: test IoU {statistics.fmean(vals):.3f} ± {sd:.3f} over {len(vals)} seeds")


if __name__ == "__main__":
    main()
