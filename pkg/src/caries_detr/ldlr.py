"""Quality-driven loss reweighting for matched detections.

Each positive match gets a quality vector (classification confidence, box
L1 fidelity, IoU). Qualities become per-term loss weights through the
linear hardness penalty ``1 + eta * (1 - q)``; weights are computed from
detached predictions and enter the loss as constants.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, log_sigmoid, power, sigmoid, tsum
from .boxes import cxcywh_to_xyxy, giou_tensor, pairwise_iou_giou

# incremented whenever a quality outside [0, 1] is clamped
CLAMP_COUNTER = {"count": 0}


@dataclass(frozen=True)
class SensitivityConfig:
    eta_cls: float = 1.0
    eta_bbox: float = 1.0
    eta_iou: float = 1.0

    def __post_init__(self):
        for name in ("eta_cls", "eta_bbox", "eta_iou"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class FocalConfig:
    alpha: float = 0.25
    gamma: float = 2.0


@dataclass
class QualityVector:
    q_cls: float
    q_bbox: float
    q_iou: float


@dataclass
class LossBreakdown:
    total: float
    cls: float
    bbox: float
    giou: float
    w_cls: np.ndarray = field(default_factory=lambda: np.zeros(0))
    w_bbox: np.ndarray = field(default_factory=lambda: np.zeros(0))
    w_iou: np.ndarray = field(default_factory=lambda: np.zeros(0))
    num_pos: int = 0


def hardness_weight(q, eta: float):
    """omega(q; eta) = 1 + eta * (1 - q); q outside [0, 1] is clamped and counted."""
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    q = np.asarray(q, dtype=np.float64)
    bad = (q < 0) | (q > 1)
    if np.any(bad):
        CLAMP_COUNTER["count"] += int(np.count_nonzero(bad))
        q = np.clip(q, 0.0, 1.0)
    w = 1.0 + eta * (1.0 - q)
    return float(w) if w.ndim == 0 else w


def box_iou(a_cxcywh, b_cxcywh) -> float:
    iou, _ = pairwise_iou_giou(cxcywh_to_xyxy(np.reshape(a_cxcywh, (1, 4))),
                               cxcywh_to_xyxy(np.reshape(b_cxcywh, (1, 4))))
    return float(iou[0, 0])


def giou(a_cxcywh, b_cxcywh) -> float:
    _, g = pairwise_iou_giou(cxcywh_to_xyxy(np.reshape(a_cxcywh, (1, 4))),
                             cxcywh_to_xyxy(np.reshape(b_cxcywh, (1, 4))))
    return float(g[0, 0])


def quality_vector(p_target: float, pred_box, gt_box) -> QualityVector:
    pred_box, gt_box = np.asarray(pred_box, dtype=np.float64), np.asarray(gt_box, dtype=np.float64)
    q_bbox = float(np.exp(-np.abs(pred_box - gt_box).sum()))
    clip = lambda v: float(min(max(v, 0.0), 1.0))
    return QualityVector(clip(p_target), clip(q_bbox), clip(box_iou(pred_box, gt_box)))


def quality_arrays(p_target: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, ...]:
    """Vectorized quality vectors for matched rows of ``pred`` and ``gt``."""
    q_cls = np.clip(p_target, 0.0, 1.0)
    q_bbox = np.clip(np.exp(-np.abs(pred - gt).sum(axis=-1)), 0.0, 1.0)
    if len(pred):
        iou, _ = pairwise_iou_giou(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(gt))
        q_iou = np.clip(np.diagonal(iou).copy(), 0.0, 1.0)
    else:
        q_iou = np.zeros(0)
    return q_cls, q_bbox, q_iou


def focal_terms(logits: Tensor, onehot: np.ndarray, alpha: float, gamma: float) -> Tensor:
    """Per-entry sigmoid focal loss, same shape as ``logits``."""
    sign = 2.0 * onehot - 1.0
    z = logits * sign
    log_pt = log_sigmoid(z)
    alpha_t = np.where(onehot > 0, alpha, 1.0 - alpha)
    if gamma == 0:
        return log_pt * (-alpha_t)
    one_minus_pt = sigmoid(-z)
    return power(one_minus_pt, gamma) * log_pt * (-alpha_t)


def _onehot(target, num_classes: int) -> np.ndarray:
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if np.any(target >= num_classes) or np.any(target < -1):
        raise IndexError(f"class index out of range for {num_classes} classes: {target.tolist()}")
    out = np.zeros((target.size, num_classes))
    pos = target >= 0
    out[np.nonzero(pos)[0], target[pos]] = 1.0
    return out


def focal_loss(logits: Tensor, target, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Sigmoid focal loss summed over classes (and rows).

    ``logits`` is [C] or [N, C]; ``target`` is a class index per row, with
    -1 meaning background (every class negative).
    """
    if not 0.0 <= alpha <= 1.0 or gamma < 0:
        raise ValueError("focal loss needs alpha in [0, 1] and gamma >= 0")
    c = logits.shape[-1]
    onehot = _onehot(target, c).reshape(logits.shape)
    return tsum(focal_terms(logits, onehot, alpha, gamma))


def l1_box_loss(pred: Tensor, gt) -> Tensor:
    return tsum((pred - Tensor(np.asarray(gt, dtype=np.float64))).abs())


def compute_weights(p_target: np.ndarray, pred: np.ndarray, gt: np.ndarray,
                    cfg: SensitivityConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    q_cls, q_bbox, q_iou = quality_arrays(p_target, pred, gt)
    w = (np.atleast_1d(hardness_weight(q_cls, cfg.eta_cls)),
         np.atleast_1d(hardness_weight(q_bbox, cfg.eta_bbox)),
         np.atleast_1d(hardness_weight(q_iou, cfg.eta_iou)))
    for arr, eta, name in zip(w, (cfg.eta_cls, cfg.eta_bbox, cfg.eta_iou), ("w_cls", "w_bbox", "w_iou")):
        if arr.size and (arr.min() < 1.0 or arr.max() > 1.0 + eta):
            raise AssertionError(f"{name} outside [1, {1 + eta}]: [{arr.min()}, {arr.max()}]")
    return w


def total_loss(pairs: list[tuple[int, int]], logits: Tensor, boxes: Tensor, gt_boxes: np.ndarray,
               gt_classes: np.ndarray, cfg: SensitivityConfig = SensitivityConfig(),
               focal: FocalConfig = FocalConfig(), weights=None) -> tuple[Tensor, LossBreakdown]:
    """Quality-weighted Focal + L1 + (1 - GIoU) over positive pairs, plus background focal.

    ``logits`` [K, C] and ``boxes`` [K, 4] are one image's query outputs;
    ``pairs`` lists (query, gt) matches. ``weights`` (w_cls, w_bbox, w_iou)
    may be passed to pin the reweighting; otherwise it is computed from
    the detached predictions.
    """
    k, c = logits.shape
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    qi = np.array([p[0] for p in pairs], dtype=np.int64)
    gi = np.array([p[1] for p in pairs], dtype=np.int64)
    if qi.size and (qi.min() < 0 or qi.max() >= k or gi.min() < 0 or gi.max() >= len(gt_boxes)):
        raise IndexError(f"match index out of range: {pairs} for {k} queries, {len(gt_boxes)} gts")
    target = np.full(k, -1, dtype=np.int64)
    target[qi] = gt_classes[gi]
    onehot = _onehot(target, c)
    per_entry = focal_terms(logits, onehot, focal.alpha, focal.gamma)
    per_query = tsum(per_entry, axis=1)

    if weights is None:
        probs = 1.0 / (1.0 + np.exp(-logits.data[qi, gt_classes[gi]])) if qi.size else np.zeros(0)
        weights = compute_weights(probs, boxes.data[qi], gt_boxes[gi], cfg)
    w_cls, w_bbox, w_iou = (np.asarray(w, dtype=np.float64) for w in weights)

    query_w = np.ones(k)
    query_w[qi] = w_cls
    cls_term = tsum(per_query * query_w)
    if qi.size:
        pb = boxes[qi]
        l1 = tsum((pb - Tensor(gt_boxes[gi])).abs(), axis=1)
        bbox_term = tsum(l1 * w_bbox)
        giou_term = tsum((1.0 - giou_tensor(pb, gt_boxes[gi])) * w_iou)
        loss = cls_term + bbox_term + giou_term
    else:
        bbox_term = giou_term = Tensor(0.0)
        loss = cls_term
    br = LossBreakdown(total=float(loss.data), cls=float(cls_term.data), bbox=float(bbox_term.data),
                       giou=float(giou_term.data), w_cls=w_cls, w_bbox=w_bbox, w_iou=w_iou,
                       num_pos=int(qi.size))
    return loss, br
