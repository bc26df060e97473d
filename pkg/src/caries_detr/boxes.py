"""Box conversions and overlap measures, numpy and autograd flavours."""
from __future__ import annotations

import numpy as np

from .autograd import Tensor, clamp, maximum, minimum


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    x1, y1, x2, y2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def _area(b: np.ndarray) -> np.ndarray:
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def pairwise_iou_giou(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """IoU and GIoU matrices for xyxy boxes a [N, 4] and b [M, 4]."""
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = _area(a) + _area(b) - inter
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    cw = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    ch = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    enclose = cw * ch
    giou = iou - np.divide(enclose - union, enclose, out=np.zeros_like(enclose), where=enclose > 0)
    return iou, giou


def giou_tensor(pred_cxcywh: Tensor, gt_cxcywh: np.ndarray) -> Tensor:
    """Row-wise GIoU of predicted boxes [N, 4] (differentiable) against fixed gt [N, 4]."""
    cx, cy, w, h = (pred_cxcywh[:, i] for i in range(4))
    px1, py1, px2, py2 = cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5
    g = cxcywh_to_xyxy(gt_cxcywh)
    gx1, gy1, gx2, gy2 = (Tensor(g[:, i]) for i in range(4))
    iw = clamp(minimum(px2, gx2) - maximum(px1, gx1), lo=0.0)
    ih = clamp(minimum(py2, gy2) - maximum(py1, gy1), lo=0.0)
    inter = iw * ih
    union = w * h + Tensor(_area(g)) - inter
    cw = maximum(px2, gx2) - minimum(px1, gx1)
    ch = maximum(py2, gy2) - minimum(py1, gy1)
    enclose = cw * ch
    # predicted boxes come out of a sigmoid, so areas are strictly positive
    return inter / union - (enclose - union) / enclose
