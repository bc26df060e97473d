"""Command-line entry point: ``caries-detr <command> [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import platform
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import AblationConfig, run_grid
from .autograd import no_grad
from .data import CocoDataset, SyntheticSpec, gen_synthetic, images_to_tensor, list_images, load_coco
from .detector import CariesDETR, TrainConfig, build_model, forward, infer, load_model, train
from .evaluation import evaluate, write_report
from .imgproc import read_rgb, write_gray, write_rgb
from .spb import PretrainCorpus, heldout_correlation, pretrain

log = logging.getLogger("caries_detr")


class UsageError(Exception):
    """Bad flag combination, detected before any compute."""


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    flags: dict
    seed: int | None
    version: str
    config: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    status: str = "running"

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def version_string() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"caries_detr {__version__}" + (f" ({rev})" if rev else "") + f" python {platform.python_version()}"


# -- flags ----------------------------------------------------------------------

def _train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch", type=int, default=d.batch)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--topk", type=int, default=d.topk)
    p.add_argument("--lambda-init", type=float, default=d.lambda_init)
    p.add_argument("--eta-cls", type=float, default=d.eta_cls)
    p.add_argument("--eta-bbox", type=float, default=d.eta_bbox)
    p.add_argument("--eta-iou", type=float, default=d.eta_iou)
    p.add_argument("--focal-alpha", type=float, default=d.focal_alpha)
    p.add_argument("--focal-gamma", type=float, default=d.focal_gamma)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--no-tsqi", action="store_true")
    p.add_argument("--no-ldlr", action="store_true")
    p.add_argument("--freeze-spb", action="store_true")
    p.add_argument("--no-hflip", action="store_true", help="disable horizontal-flip augmentation")


def _config_from(args) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    cfg = TrainConfig(**{k: v for k, v in vars(args).items() if k in names})
    cfg.hflip = not args.no_hflip
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="caries-detr", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic benchmark")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-size", type=int, default=64)
    for split, n in SyntheticSpec().counts().items():
        g.add_argument(f"--n-{split}", type=int, default=n)

    pre = sub.add_parser("pretrain", help="self-supervised structure-branch pretraining")
    pre.add_argument("--data", required=True, help="image directory, or a dataset root with a pretrain/ split")
    pre.add_argument("--out", required=True)
    pre.add_argument("--epochs", type=int, default=20)
    pre.add_argument("--batch", type=int, default=16)
    pre.add_argument("--lr", type=float, default=1e-3)
    pre.add_argument("--weight-decay", type=float, default=1e-4)
    pre.add_argument("--seed", type=int, default=0)
    pre.add_argument("--heldout", help="optional image directory for a held-out saliency correlation")

    t = sub.add_parser("train", help="train the detector")
    t.add_argument("--data", required=True, help="dataset root (uses train/) or a split directory")
    t.add_argument("--out", required=True)
    t.add_argument("--spb", help="pretrained structure-branch checkpoint")
    _train_flags(t)

    e = sub.add_parser("eval", help="COCO-style evaluation of a trained checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="dataset root (uses test/) or a split directory")
    e.add_argument("--out", help="directory for report.json and the manifest (default: checkpoint dir)")
    e.add_argument("--score-thr", type=float, default=0.0)

    i = sub.add_parser("infer", help="detections for a folder of images")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--score-thr", type=float, default=0.3)
    i.add_argument("--overlay", action="store_true", help="also write images with boxes drawn")

    s = sub.add_parser("saliency", help="export structural saliency and hybrid score maps")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)

    a = sub.add_parser("ablate", help="the TSQI x LDLR ablation grid")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=int, default=3, help="number of seeds (0..N-1)")
    a.add_argument("--pretrain-epochs", type=int, default=20)
    _train_flags(a)
    return p


# -- helpers --------------------------------------------------------------------

def _split(path: Path, name: str) -> CocoDataset:
    if (path / name / "annotations.json").exists():
        path = path / name
    if not path.exists():
        raise UsageError(f"{path}: no such dataset")
    return load_coco(path)


def _images(path: Path) -> tuple[list[Path], np.ndarray]:
    if not path.exists():
        raise UsageError(f"{path}: no such file or directory")
    paths = list_images(path)
    if not paths:
        raise UsageError(f"{path}: no images found")
    return paths, np.stack([read_rgb(p) for p in paths])


def _ckpt(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "model.ckpt"
    if not p.exists():
        raise UsageError(f"{p}: checkpoint not found")
    return p


def _draw_boxes(img: np.ndarray, dets) -> np.ndarray:
    out = img.copy()
    h, w = img.shape[:2]
    colors = np.array([[255, 40, 40], [40, 200, 255], [255, 230, 0]], dtype=np.uint8)
    for d in dets:
        cx, cy, bw, bh = d.box
        x1, x2 = (np.clip([(cx - bw / 2) * w, (cx + bw / 2) * w - 1], 0, w - 1)).astype(int)
        y1, y2 = (np.clip([(cy - bh / 2) * h, (cy + bh / 2) * h - 1], 0, h - 1)).astype(int)
        c = colors[d.class_id % len(colors)]
        out[y1, x1:x2 + 1] = c
        out[y2, x1:x2 + 1] = c
        out[y1:y2 + 1, x1] = c
        out[y1:y2 + 1, x2] = c
    return out


def _minmax(m: np.ndarray) -> np.ndarray:
    lo, hi = m.min(), m.max()
    return (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)


# -- commands -------------------------------------------------------------------

def cmd_gen_data(args, manifest: RunManifest) -> None:
    spec = SyntheticSpec(image_size=args.image_size, n_train=args.n_train, n_val=args.n_val,
                         n_test=args.n_test, n_pretrain=args.n_pretrain, seed=args.seed)
    manifest.config = asdict(spec)
    coco = gen_synthetic(spec, args.out)
    manifest.outputs = {split: str(Path(args.out) / split) for split in coco}
    print(f"wrote {sum(len(c['images']) for c in coco.values())} images to {args.out}")


def cmd_pretrain(args, manifest: RunManifest) -> None:
    root = Path(args.data)
    if (root / "pretrain").is_dir():
        root = root / "pretrain"
    paths = list_images(root) if root.exists() else []
    if not paths:
        raise UsageError(f"{args.data}: no pretraining images found")
    if args.epochs < 1 or args.batch < 1:
        raise UsageError("epochs and batch must be positive")
    model = CariesDETR(TrainConfig(seed=args.seed))
    result = pretrain(PretrainCorpus(paths, seed=args.seed), model.backbone, model.spb, epochs=args.epochs,
                      batch=args.batch, lr=args.lr, weight_decay=args.weight_decay, out_dir=args.out)
    out = Path(args.out)
    manifest.outputs = {"spb": str(out / "spb.ckpt"), "loss_csv": str(out / "pretrain_loss.csv")}
    manifest.outputs["loss"] = {"initial": result.losses[0], "final": result.losses[-1]}
    if result.skipped:
        manifest.outputs["skipped"] = result.skipped
    print(f"L_pre {result.losses[0]:.4f} -> {result.losses[-1]:.4f} over {args.epochs} epochs")
    if args.heldout:
        _, held = _images(Path(args.heldout))
        r = heldout_correlation(held, model.backbone, model.spb)
        manifest.outputs["heldout_pearson"] = r
        print(f"held-out Pearson r = {r:.4f}")


def cmd_train(args, manifest: RunManifest) -> None:
    cfg = _config_from(args)
    ds = _split(Path(args.data), "train")
    cfg.validate(max((len(g) for g in ds.gts), default=0))
    if args.spb and not Path(args.spb).exists():
        raise UsageError(f"{args.spb}: structure-branch checkpoint not found")
    if not cfg.no_tsqi and not args.spb:
        log.warning("training with TSQI but no --spb checkpoint; the structure branch starts untrained")
    manifest.config = asdict(cfg)
    manifest.config["spb"] = args.spb
    model = build_model(cfg, args.spb)
    res = train(cfg, ds.load_images(), ds.gts, model=model, out_dir=args.out, log_every=50)
    out = Path(args.out)
    manifest.outputs = {"model": str(out / "model.ckpt"), "config": str(out / "config.json"),
                        "loss_csv": str(out / "loss.csv"), "final_loss": res.records[-1].total}
    print(f"trained {len(res.records)} steps, final loss {res.records[-1].total:.4f}; wrote {out}")


def cmd_eval(args, manifest: RunManifest) -> None:
    ckpt = _ckpt(args.ckpt)
    ds = _split(Path(args.data), "test")
    model = load_model(ckpt)
    if len(ds.class_names) != model.cfg.num_classes:
        raise UsageError(f"dataset has {len(ds.class_names)} classes, model has {model.cfg.num_classes}")
    manifest.config = {"ckpt": str(ckpt), "data": str(ds.root), "score_thr": args.score_thr,
                       "model": asdict(model.cfg)}
    dets = infer(model, ds.load_images(), args.score_thr)
    res = evaluate({g.image_id: d for g, d in zip(ds.gts, dets)}, ds.gts, model.cfg.num_classes)
    out = Path(args.out) if args.out else ckpt.parent
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "report.json", res)
    manifest.outputs = {"report": str(out / "report.json"), "map": res.map, "map50": res.map50,
                        "map75": res.map75}
    print(res.table(ds.class_names))


def cmd_infer(args, manifest: RunManifest) -> None:
    ckpt = _ckpt(args.ckpt)
    paths, images = _images(Path(args.data))
    model = load_model(ckpt)
    manifest.config = {"ckpt": str(ckpt), "data": args.data, "score_thr": args.score_thr}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dets = infer(model, images, args.score_thr)
    with open(out / "detections.jsonl", "w") as fh:
        for k, (p, dl) in enumerate(zip(paths, dets)):
            for d in dl:
                rec = d.to_json(k)
                rec["file_name"] = p.name
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    manifest.outputs = {"detections": str(out / "detections.jsonl"), "count": sum(map(len, dets))}
    if args.overlay:
        (out / "overlay").mkdir(exist_ok=True)
        for p, img, dl in zip(paths, images, dets):
            write_rgb(out / "overlay" / (p.stem + ".png"), _draw_boxes(img, dl))
        manifest.outputs["overlay"] = str(out / "overlay")
    print(f"{sum(map(len, dets))} detections over {len(paths)} images -> {out / 'detections.jsonl'}")


def cmd_saliency(args, manifest: RunManifest) -> None:
    ckpt = _ckpt(args.ckpt)
    paths, images = _images(Path(args.data))
    model = load_model(ckpt)
    if model.cfg.no_tsqi:
        raise UsageError("checkpoint was trained with --no-tsqi; it has no structure branch to export")
    manifest.config = {"ckpt": str(ckpt), "data": args.data}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with no_grad():
        fo = forward(model, images_to_tensor(images))
    for p, sal, hyb in zip(paths, fo.saliency.data, fo.hybrid.data):
        write_gray(out / f"{p.stem}_pstr.png", sal)
        write_gray(out / f"{p.stem}_hybrid.png", _minmax(hyb))
    manifest.outputs = {"dir": str(out), "maps": 2 * len(paths)}
    print(f"wrote {2 * len(paths)} maps to {out}")


def cmd_ablate(args, manifest: RunManifest) -> None:
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    cfg = AblationConfig(train=_config_from(args), seeds=tuple(range(args.seeds)),
                         pretrain_epochs=args.pretrain_epochs)
    if args.no_tsqi or args.no_ldlr:
        log.warning("--no-tsqi/--no-ldlr are ignored by ablate; every row of the grid is run")
    ds = _split(Path(args.data), "train")
    cfg.train.validate(max((len(g) for g in ds.gts), default=0))
    manifest.config = {"train": asdict(cfg.train), "seeds": list(cfg.seeds),
                       "pretrain_epochs": cfg.pretrain_epochs, "pretrain_lr": cfg.pretrain_lr}
    grid = run_grid(args.data, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(grid.to_json(), indent=2, sort_keys=True) + "\n")
    (out / "ablation.txt").write_text(grid.table() + "\n")
    manifest.outputs = {"json": str(out / "ablation.json"), "table": str(out / "ablation.txt")}
    print(grid.table())


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "infer": cmd_infer, "saliency": cmd_saliency, "ablate": cmd_ablate}


def _manifest_path(args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out) / f"manifest_{args.command}.json"
    return _ckpt(args.ckpt).parent / f"manifest_{args.command}.json"


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    settings = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
    manifest = RunManifest(args.command, argv, settings, getattr(args, "seed", None), version_string())
    try:
        path = _manifest_path(args)
        manifest.write(path)
        t0 = time.perf_counter()
        COMMANDS[args.command](args, manifest)
    except (UsageError, ValueError) as exc:
        print(f"caries-detr {args.command}: error: {exc}", file=sys.stderr)
        return 2
    manifest.timings = {"wall_seconds": round(time.perf_counter() - t0, 3)}
    manifest.status = "done"
    manifest.write(path)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
