"""COCO-style average precision over IoU thresholds 0.50:0.05:0.95."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .boxes import cxcywh_to_xyxy
from .structures import Detection, GroundTruthSet

# rounded so that e.g. an IoU of exactly 0.6 passes the 0.60 threshold
IOU_THRESHOLDS = np.round(0.5 + 0.05 * np.arange(10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def iou_xyxy(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1]) + max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def ap_per_class(dets: list[tuple[int, float, np.ndarray]], gts: dict[int, np.ndarray], iou_thr: float) -> float | None:
    """AP for one class at one IoU threshold.

    ``dets`` holds (image_id, score, xyxy box); ``gts`` maps image_id to an
    [n, 4] xyxy array. Returns None when the class has no ground truth and
    no detections; 0.0 when it has detections but no ground truth.
    """
    npos = sum(len(v) for v in gts.values())
    if npos == 0:
        return None if not dets else 0.0
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    used = {img: np.zeros(len(v), dtype=bool) for img, v in gts.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        img, _, box = dets[i]
        g = gts.get(img)
        if g is None or len(g) == 0:
            continue
        row = np.array([iou_xyxy(box, gb) for gb in g])
        row[used[img]] = -1.0
        j = int(np.argmax(row))
        if row[j] >= iou_thr:
            used[img][j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / npos
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    # precision envelope, non-increasing from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.array([precision[i] if i < len(precision) else 0.0 for i in idx])
    return float(sampled.mean())


@dataclass
class EvalResult:
    per_class: dict[int, dict] = field(default_factory=dict)
    map: float = 0.0
    map50: float = 0.0
    map75: float = 0.0

    def to_json(self) -> dict:
        return {
            "per_class": {str(c): {"ap": v["ap"], "ap50": v["ap50"], "ap75": v["ap75"]}
                          for c, v in sorted(self.per_class.items())},
            "map": self.map, "map50": self.map50, "map75": self.map75,
        }

    def table(self, class_names: list[str] | None = None) -> str:
        lines = [f"{'class':<16}{'AP':>8}{'AP50':>8}{'AP75':>8}"]
        for c, v in sorted(self.per_class.items()):
            name = class_names[c] if class_names and c < len(class_names) else str(c)
            lines.append(f"{name:<16}{v['ap']:>8.4f}{v['ap50']:>8.4f}{v['ap75']:>8.4f}")
        lines.append(f"{'mAP':<16}{self.map:>8.4f}{self.map50:>8.4f}{self.map75:>8.4f}")
        return "\n".join(lines)


def evaluate(dets: dict[int, list[Detection]], gts: list[GroundTruthSet], num_classes: int) -> EvalResult:
    """Per-class AP and mAP; classes without ground truth are left out of the means."""
    for g in gts:
        if len(g.classes) and (g.classes.min() < 0 or g.classes.max() >= num_classes):
            raise ValueError(f"image {g.image_id}: ground-truth class outside 0..{num_classes - 1}")
    for img, dl in dets.items():
        for d in dl:
            if not 0 <= d.class_id < num_classes:
                raise ValueError(f"image {img}: detection class {d.class_id} outside 0..{num_classes - 1}")
    result = EvalResult()
    means, m50, m75 = [], [], []
    for c in range(num_classes):
        gt_c = {g.image_id: cxcywh_to_xyxy(g.boxes[g.classes == c]).reshape(-1, 4) for g in gts}
        det_c = [(img, d.score, cxcywh_to_xyxy(d.box)) for img, dl in dets.items() for d in dl if d.class_id == c]
        if sum(len(v) for v in gt_c.values()) == 0:
            continue
        aps = [ap_per_class(det_c, gt_c, t) for t in IOU_THRESHOLDS]
        entry = {"ap": float(np.mean(aps)), "ap50": aps[0], "ap75": aps[5], "ap_per_threshold": aps}
        result.per_class[c] = entry
        means.append(entry["ap"])
        m50.append(entry["ap50"])
        m75.append(entry["ap75"])
    if means:
        result.map, result.map50, result.map75 = float(np.mean(means)), float(np.mean(m50)), float(np.mean(m75))
    return result


def write_report(path, result: EvalResult) -> None:
    with open(path, "w") as fh:
        json.dump(result.to_json(), fh, indent=2, sort_keys=True)
