#!/usr/bin/env python3
"""Pretrain the structure branch on the 200-image pretrain split for several
seeds and report the loss ratio and held-out Pearson r per seed."""
import argparse
import time
from pathlib import Path

from caries_detr.data import SyntheticSpec, gen_synthetic, load_coco
from caries_detr.detector import CariesDETR, TrainConfig
from caries_detr.spb import heldout_correlation, pretrain_on_arrays


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--root", default="runs/bench")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    args = p.parse_args()

    root = Path(args.root)
    if not (root / "pretrain" / "annotations.json").exists():
        gen_synthetic(SyntheticSpec(), root)
    pre = load_coco(root / "pretrain").load_images()
    held = load_coco(root / "test").load_images()
    print(f"{'seed':>4} {'L0':>8} {'L_end':>8} {'ratio':>6} {'r':>6} {'sec':>5}")
    for seed in range(args.seeds):
        t0 = time.perf_counter()
        model = CariesDETR(TrainConfig(seed=seed))
        res = pretrain_on_arrays(pre, model.backbone, model.spb, epochs=args.epochs, lr=args.lr, seed=seed)
        r = heldout_correlation(held, model.backbone, model.spb)
        print(f"{seed:>4} {res.losses[0]:8.4f} {res.losses[-1]:8.4f} {res.losses[-1] / res.losses[0]:6.3f} "
              f"{r:6.3f} {time.perf_counter() - t0:5.0f}")


if __name__ == "__main__":
    main()
