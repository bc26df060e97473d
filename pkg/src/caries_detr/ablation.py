"""The {TSQI} x {LDLR} module ablation on a generated benchmark."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import CocoDataset, load_coco
from .detector import CariesDETR, TrainConfig, infer, train
from .evaluation import EvalResult, evaluate
from .spb import pretrain_on_arrays

log = logging.getLogger(__name__)

# (label, no_tsqi, no_ldlr), baseline first
ROWS = (
    ("baseline", True, True),
    ("+TSQI", False, True),
    ("+LDLR", True, False),
    ("full", False, False),
)


@dataclass
class AblationConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple[int, ...] = (0, 1, 2)
    pretrain_epochs: int = 20
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 16


@dataclass
class AblationCell:
    label: str
    seed: int
    result: EvalResult
    seconds: float


@dataclass
class AblationGrid:
    cells: list[AblationCell] = field(default_factory=list)

    def values(self, label: str, key: str) -> np.ndarray:
        return np.array([getattr(c.result, key) for c in self.cells if c.label == label])

    def mean(self, label: str, key: str = "map50") -> float:
        return float(self.values(label, key).mean())

    def table(self) -> str:
        lines = [f"{'setting':<10}{'TSQI':>6}{'LDLR':>6}  {'mAP':>15}  {'mAP50':>15}  {'mAP75':>15}"]
        for label, no_tsqi, no_ldlr in ROWS:
            if not any(c.label == label for c in self.cells):
                continue
            cols = []
            for key in ("map", "map50", "map75"):
                v = self.values(label, key)
                cols.append(f"{v.mean():.4f} ± {v.std():.4f}")
            lines.append(f"{label:<10}{'' if no_tsqi else 'x':>6}{'' if no_ldlr else 'x':>6}  "
                         + "  ".join(f"{c:>15}" for c in cols))
        return "\n".join(lines)

    def to_json(self) -> dict:
        rows = {}
        for label, _, _ in ROWS:
            if any(c.label == label for c in self.cells):
                rows[label] = {k: {"mean": self.mean(label, k), "std": float(self.values(label, k).std()),
                                   "per_seed": self.values(label, k).tolist()}
                               for k in ("map", "map50", "map75")}
        return {"rows": rows, "seeds": sorted({c.seed for c in self.cells}),
                "seconds": {f"{c.label}/{c.seed}": c.seconds for c in self.cells}}


def _split(root: Path, name: str) -> CocoDataset:
    return load_coco(root / name if (root / name / "annotations.json").exists() else root)


def run_grid(data_root, cfg: AblationConfig, test_split: str = "test") -> AblationGrid:
    """Train and evaluate every row for every seed.

    The structure branch is pretrained once per seed on the ``pretrain`` split
    and shared by the two rows that use it.
    """
    root = Path(data_root)
    tr, te = _split(root, "train"), _split(root, test_split)
    pre = _split(root, "pretrain").load_images()
    tr_images, te_images = tr.load_images(), te.load_images()
    cfg.train.validate(max((len(g) for g in tr.gts), default=0))
    grid = AblationGrid()
    for seed in cfg.seeds:
        spb_arrays = None
        for label, no_tsqi, no_ldlr in ROWS:
            t0 = time.perf_counter()
            tcfg = replace(cfg.train, seed=seed, no_tsqi=no_tsqi, no_ldlr=no_ldlr)
            model = CariesDETR(tcfg)
            if not no_tsqi:
                if spb_arrays is None:
                    pretrain_on_arrays(pre, model.backbone, model.spb, epochs=cfg.pretrain_epochs,
                                       batch=cfg.pretrain_batch, lr=cfg.pretrain_lr, seed=seed)
                    spb_arrays = model.spb.state_arrays()
                else:
                    model.spb.load_arrays(spb_arrays)
            train(tcfg, tr_images, tr.gts, model=model)
            dets = infer(model, te_images)
            res = evaluate({g.image_id: d for g, d in zip(te.gts, dets)}, te.gts, tcfg.num_classes)
            cell = AblationCell(label, seed, res, time.perf_counter() - t0)
            log.info("seed %d %-8s mAP50 %.4f (%.0fs)", seed, label, res.map50, cell.seconds)
            grid.cells.append(cell)
    return grid
