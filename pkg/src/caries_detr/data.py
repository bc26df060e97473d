"""Synthetic tooth/lesion corpus, COCO-subset ingestion and batching."""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .imgproc import read_rgb, write_rgb
from .structures import GroundTruthSet

CLASSES = ("lesion-small", "lesion-large", "distractor")
SPLITS = ("train", "val", "test", "pretrain")


class CocoError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    image_size: int = 64
    n_train: int = 300
    n_val: int = 60
    n_test: int = 60
    n_pretrain: int = 200
    min_objects: int = 1
    max_objects: int = 4
    classes: tuple[str, ...] = CLASSES
    seed: int = 0

    def counts(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test, "pretrain": self.n_pretrain}


# -- rendering ------------------------------------------------------------------
BAND_RGB = np.array([222.0, 212.0, 190.0])
GUM_RGB = np.array([196.0, 142.0, 140.0])
SPOT_RGB = np.array([104.0, 70.0, 52.0])
# class -> (min diameter, max diameter) in pixels
SIZE_RANGE = {0: (6.0, 9.0), 1: (11.0, 15.0), 2: (7.0, 14.0)}


def _band_mask(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Soft mask of a rounded, slightly curved tooth row split into 2-3 crowns."""
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    center = rng.uniform(0.4, 0.6) * n
    half = rng.uniform(0.17, 0.21) * n
    bend = rng.uniform(-0.06, 0.06) * n
    mid = center + bend * np.cos(np.pi * (xx / n - 0.5) * 2.0)
    x0, x1 = rng.uniform(0.02, 0.1) * n, rng.uniform(0.9, 0.98) * n
    # rounded ends: distance to the capsule-like shape
    dy = np.abs(yy - mid) - half
    dx = np.maximum(x0 - xx, xx - x1)
    r = half * 0.6
    inside_d = np.where((dx > -r) & (dy > -r),
                        np.hypot(np.maximum(dx + r, 0), np.maximum(dy + r, 0)) - r,
                        np.maximum(dx, dy))
    # wide ramp so the crown outline is a weaker edge than the spots on it
    mask = np.clip(0.5 - inside_d / 4.0, 0.0, 1.0)
    # interproximal gaps between crowns
    n_crowns = int(rng.integers(2, 4))
    for cut in np.linspace(x0, x1, n_crowns + 1)[1:-1] + rng.uniform(-2, 2, n_crowns - 1):
        gap = np.clip(np.abs(xx - cut) - 0.6, 0.0, 1.0)
        mask = mask * (0.8 + 0.2 * gap)
    return mask, mid


def _ellipse_alpha(n: int, cx: float, cy: float, rx: float, ry: float) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    d = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    return np.clip((1.0 - d) * min(rx, ry) + 0.5, 0.0, 1.0)


def render_image(rng: np.random.Generator, spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One synthetic image with pixel xywh boxes and class ids."""
    n = spec.image_size
    mask, _ = _band_mask(rng, n)
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    light = 1.0 + 0.12 * ((xx / n - 0.5) * rng.uniform(-1, 1) + (yy / n - 0.5) * rng.uniform(-1, 1))
    band = BAND_RGB * rng.uniform(0.9, 1.05)
    gum = GUM_RGB * rng.uniform(0.92, 1.05)
    img = mask[..., None] * band + (1.0 - mask[..., None]) * gum

    solid = mask > 0.98
    empty = mask < 0.02
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes, classes, taken = [], [], []
    for _ in range(count):
        for _attempt in range(60):
            cls = int(rng.choice(3, p=[0.4, 0.3, 0.3]))
            lo, hi = SIZE_RANGE[cls]
            w = rng.uniform(lo, hi)
            h = np.clip(w * rng.uniform(0.75, 1.33), lo * 0.75, hi)
            rx, ry = w / 2, h / 2
            cx = rng.uniform(rx + 1, n - rx - 1)
            cy = rng.uniform(ry + 1, n - ry - 1)
            x1, y1, x2, y2 = cx - rx, cy - ry, cx + rx, cy + ry
            if any(x1 < b[2] + 2 and b[0] < x2 + 2 and y1 < b[3] + 2 and b[1] < y2 + 2 for b in taken):
                continue
            alpha = _ellipse_alpha(n, cx, cy, rx, ry)
            footprint = alpha > 0
            region = solid if cls < 2 else empty
            # lesions sit fully on a crown, distractors fully off the band
            if not np.all(region[footprint]):
                continue
            if cls < 2:
                color = band * rng.uniform(0.58, 0.7) * np.array([1.0, 0.9, 0.8])
            else:
                color = SPOT_RGB * rng.uniform(0.85, 1.1)
            img = alpha[..., None] * color + (1.0 - alpha[..., None]) * img
            taken.append((x1, y1, x2, y2))
            boxes.append((x1, y1, x2 - x1, y2 - y1))
            classes.append(cls)
            break
    img = img * light[..., None] + rng.normal(0.0, 4.0, img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return img, np.array(boxes, dtype=np.float64).reshape(-1, 4), np.array(classes, dtype=np.int64)


def gen_synthetic(spec: SyntheticSpec, out_dir) -> dict[str, dict]:
    """Write ``{out}/{split}/images/*.png`` and ``{out}/{split}/annotations.json`` for every split.

    Image ids are unique across splits, so splits are disjoint by id.
    """
    out = Path(out_dir)
    streams = np.random.SeedSequence(spec.seed).spawn(len(SPLITS))
    next_image_id, next_ann_id = 1, 1
    files = {}
    for split, ss in zip(SPLITS, streams):
        rng = np.random.default_rng(ss)
        img_dir = out / split / "images"
        img_dir.mkdir(parents=True, exist_ok=True)
        coco = {"images": [], "annotations": [],
                "categories": [{"id": i + 1, "name": c} for i, c in enumerate(spec.classes)]}
        for _ in range(spec.counts()[split]):
            img, boxes, classes = render_image(rng, spec)
            name = f"{next_image_id:06d}.png"
            write_rgb(img_dir / name, img)
            coco["images"].append({"id": next_image_id, "file_name": name,
                                   "width": spec.image_size, "height": spec.image_size})
            for b, c in zip(boxes, classes):
                coco["annotations"].append({"id": next_ann_id, "image_id": next_image_id,
                                            "category_id": int(c) + 1, "bbox": [float(v) for v in b],
                                            "area": float(b[2] * b[3]), "iscrowd": 0})
                next_ann_id += 1
            next_image_id += 1
        _write_coco(out / split / "annotations.json", coco)
        files[split] = coco
    (out / "synthetic_spec.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")
    return files


def _write_coco(path: Path, coco: dict) -> None:
    # one entry per line keeps load diagnostics line-precise
    parts = ["{"]
    keys = ["images", "annotations", "categories"]
    for ki, key in enumerate(keys):
        entries = coco[key]
        parts.append(f' "{key}": [')
        for i, e in enumerate(entries):
            parts.append("  " + json.dumps(e, sort_keys=True) + ("," if i < len(entries) - 1 else ""))
        parts.append(" ]" + ("," if ki < len(keys) - 1 else ""))
    parts.append("}")
    path.write_text("\n".join(parts) + "\n")


# -- loading --------------------------------------------------------------------
@dataclass
class CocoDataset:
    root: Path
    image_dir: Path
    gts: list[GroundTruthSet] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)
    category_ids: list[int] = field(default_factory=list)

    def image_path(self, gt: GroundTruthSet) -> Path:
        return self.image_dir / gt.file_name

    def load_images(self) -> np.ndarray:
        return np.stack([read_rgb(self.image_path(g)) for g in self.gts]) if self.gts else np.zeros((0, 0, 0, 3), np.uint8)


def _entry_lines(text: str, key: str) -> list[int]:
    """1-based line number of each element of the top-level array ``key``."""
    m = re.search(rf'"{key}"\s*:\s*\[', text)
    if not m:
        return []
    dec = json.JSONDecoder()
    pos = m.end()
    lines = []
    while True:
        while pos < len(text) and text[pos] in " \t\r\n,":
            pos += 1
        if pos >= len(text) or text[pos] == "]":
            break
        lines.append(text.count("\n", 0, pos) + 1)
        try:
            _, pos = dec.raw_decode(text, pos)
        except json.JSONDecodeError:
            break
    return lines


def load_coco(path) -> CocoDataset:
    """Parse an annotations file; boxes become normalized cxcywh.

    Accepts a path to the JSON file or to a split directory holding
    ``annotations.json`` and ``images/``.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "annotations.json"
    if not path.exists():
        raise CocoError(f"{path}: no such file")
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CocoError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise CocoError(f"{path}:1: top level must be an object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise CocoError(f"{path}: missing or non-list '{key}'")
    lines = {k: _entry_lines(text, k) for k in ("images", "annotations", "categories")}

    def where(key, i):
        ln = lines[key][i] if i < len(lines[key]) else "?"
        return f"{path}:{ln}: {key}[{i}]"

    def need(entry, key, i, field_name, kind):
        if field_name not in entry or not isinstance(entry[field_name], kind) or isinstance(entry[field_name], bool):
            raise CocoError(f"{where(key, i)}: field '{field_name}' missing or not {getattr(kind, '__name__', kind)}")
        return entry[field_name]

    cats = []
    for i, c in enumerate(doc["categories"]):
        if not isinstance(c, dict):
            raise CocoError(f"{where('categories', i)}: entry must be an object")
        cats.append((need(c, "categories", i, "id", int), str(c.get("name", f"class{c['id']}"))))
    cats.sort()
    cat_index = {cid: k for k, (cid, _) in enumerate(cats)}
    if len(cat_index) != len(cats):
        raise CocoError(f"{path}: duplicate category ids")

    images = {}
    order = []
    for i, im in enumerate(doc["images"]):
        if not isinstance(im, dict):
            raise CocoError(f"{where('images', i)}: entry must be an object")
        iid = need(im, "images", i, "id", int)
        if iid in images:
            raise CocoError(f"{where('images', i)}: duplicate image id {iid}")
        w = need(im, "images", i, "width", int)
        h = need(im, "images", i, "height", int)
        if w <= 0 or h <= 0:
            raise CocoError(f"{where('images', i)}: non-positive size {w}x{h}")
        images[iid] = GroundTruthSet(image_id=iid, file_name=need(im, "images", i, "file_name", str), width=w, height=h)
        order.append(iid)

    per_image: dict[int, list] = {iid: [] for iid in images}
    for i, a in enumerate(doc["annotations"]):
        if not isinstance(a, dict):
            raise CocoError(f"{where('annotations', i)}: entry must be an object")
        iid = need(a, "annotations", i, "image_id", int)
        if iid not in images:
            raise CocoError(f"{where('annotations', i)}: unknown image id {iid}")
        cid = need(a, "annotations", i, "category_id", int)
        if cid not in cat_index:
            raise CocoError(f"{where('annotations', i)}: unknown category id {cid}")
        bbox = a.get("bbox")
        if (not isinstance(bbox, list) or len(bbox) != 4
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in bbox)):
            raise CocoError(f"{where('annotations', i)}: bbox must be four numbers")
        x, y, w, h = (float(v) for v in bbox)
        g = images[iid]
        tol = 1e-6
        if w < 0 or h < 0 or x < -tol or y < -tol or x + w > g.width + tol or y + h > g.height + tol:
            raise CocoError(f"{where('annotations', i)}: bbox {bbox} outside image {iid} ({g.width}x{g.height})")
        per_image[iid].append((pixel_xywh_to_cxcywh(np.array([x, y, w, h]), g.width, g.height), cat_index[cid]))

    gts = []
    for iid in order:
        g = images[iid]
        if per_image[iid]:
            g.boxes = np.stack([b for b, _ in per_image[iid]])
            g.classes = np.array([c for _, c in per_image[iid]], dtype=np.int64)
        gts.append(g)
    return CocoDataset(root=path.parent, image_dir=path.parent / "images", gts=gts,
                       class_names=[n for _, n in cats], category_ids=[cid for cid, _ in cats])


def pixel_xywh_to_cxcywh(b: np.ndarray, width: int, height: int) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    x, y, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x + w / 2) / width, (y + h / 2) / height, w / width, h / height], axis=-1)


def cxcywh_to_pixel_xywh(b: np.ndarray, width: int, height: int) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = b[..., 0] * width, b[..., 1] * height, b[..., 2] * width, b[..., 3] * height
    return np.stack([cx - w / 2, cy - h / 2, w, h], axis=-1)


def list_images(path) -> list[Path]:
    """PNG/JPEG files under a directory (or its ``images/`` child), sorted."""
    path = Path(path)
    if path.is_file():
        return [path]
    if (path / "images").is_dir():
        path = path / "images"
    exts = {".png", ".jpg", ".jpeg", ".bmp"}
    return sorted(p for p in path.iterdir() if p.suffix.lower() in exts)


def images_to_tensor(images: np.ndarray) -> np.ndarray:
    """uint8 [N, H, W, 3] -> float64 [N, 3, H, W] in [0, 1]."""
    return np.ascontiguousarray(np.transpose(images.astype(np.float64) / 255.0, (0, 3, 1, 2)))


def hflip(images: np.ndarray, boxes: list[np.ndarray]) -> tuple[np.ndarray, list[np.ndarray]]:
    """Flip [N, C, H, W] images left-right and mirror cxcywh boxes."""
    flipped = []
    for b in boxes:
        b = b.copy()
        if len(b):
            b[:, 0] = 1.0 - b[:, 0]
        flipped.append(b)
    return images[..., ::-1].copy(), flipped
