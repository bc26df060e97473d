"""Structure-aware query initialization.

Semantic scores are modulated by structural saliency, S_sem * (1 + lam * P),
the top-K cells of the result become anchors, and each anchor's query is a
linear projection of its positional encoding concatenated with its score.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Conv2d, Linear, ShapeError, Tensor, concat, gather, max_over_axis, reshape, sigmoid
from .spb import SpbNet, spb_forward

REF_SIZE = 0.1


def compute_saliency(feat: Tensor, spb: SpbNet) -> Tensor:
    """sigmoid(SPB(feat)) with the channel axis dropped: [.., h, w]."""
    raw = spb_forward(spb, feat)
    return sigmoid(reshape(raw, raw.shape[:-3] + raw.shape[-2:]))


def semantic_logits(feat: Tensor, cls_head: Conv2d) -> Tensor:
    if cls_head.weight.shape[2:] != (1, 1):
        raise ShapeError("semantic head must be a 1x1 convolution")
    return cls_head(feat)


def semantic_scores(feat: Tensor, cls_head: Conv2d, logits: Tensor | None = None) -> Tensor:
    """Max over classes of the per-location sigmoid class score: [.., h, w]."""
    if logits is None:
        logits = semantic_logits(feat, cls_head)
    return max_over_axis(sigmoid(logits), axis=-3)


def hybrid_scores(sem: Tensor, sal: Tensor, lam: Tensor) -> Tensor:
    if sem.shape != sal.shape:
        raise ShapeError(f"hybrid_scores: semantic map {sem.shape} and saliency {sal.shape} differ")
    return sem * (1.0 + lam * sal)


@dataclass
class AnchorSet:
    """Top-K cells per image; arrays are [B, K] (or [K] for a single map)."""

    flat_index: np.ndarray
    gx: np.ndarray
    gy: np.ndarray
    cx: np.ndarray
    cy: np.ndarray
    scores: Tensor  # gathered hybrid scores, differentiable

    @property
    def k(self) -> int:
        return self.flat_index.shape[-1]


def _topk_rows(values: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated scores: ties go to the lower row-major index
    return np.argsort(-values, axis=-1, kind="stable")[..., :k]


def select_topk(score_map: Tensor, k: int) -> AnchorSet:
    """K highest cells of an [h, w] or [B, h, w] score map, in descending order."""
    h, w = score_map.shape[-2:]
    if not 0 < k <= h * w:
        raise ValueError(f"K={k} out of range for a {h}x{w} map")
    flat = reshape(score_map, score_map.shape[:-2] + (h * w,))
    idx = _topk_rows(flat.data, k)
    gy, gx = np.divmod(idx, w)
    return AnchorSet(flat_index=idx, gx=gx, gy=gy, cx=(gx + 0.5) / w, cy=(gy + 0.5) / h,
                     scores=gather(flat, -1, idx))


def anchors_from_index(score_map: Tensor, idx: np.ndarray) -> AnchorSet:
    """Rebuild an AnchorSet for fixed cell indices (used to pin selection)."""
    h, w = score_map.shape[-2:]
    flat = reshape(score_map, score_map.shape[:-2] + (h * w,))
    gy, gx = np.divmod(idx, w)
    return AnchorSet(flat_index=idx, gx=gx, gy=gy, cx=(gx + 0.5) / w, cy=(gy + 0.5) / h,
                     scores=gather(flat, -1, idx))


def positional_encoding(cx, cy, d_pe: int) -> np.ndarray:
    """Sinusoidal 2-D encoding: d_pe/2 dims per axis, interleaved sin/cos, x first.

    Works elementwise on array inputs, adding a trailing axis of size d_pe.
    """
    if d_pe % 4:
        raise ValueError(f"d_pe={d_pe} must be divisible by 4")
    half = d_pe // 2
    k = np.arange(half // 2)
    div = 10000.0 ** (2 * k / half)

    def axis(c):
        ang = 2 * np.pi * np.asarray(c, dtype=np.float64)[..., None] / div
        out = np.empty(ang.shape[:-1] + (half,))
        out[..., 0::2] = np.sin(ang)
        out[..., 1::2] = np.cos(ang)
        return out

    return np.concatenate([axis(cx), axis(cy)], axis=-1)


@dataclass
class QuerySet:
    embeddings: Tensor  # [.., K, d_model]
    ref_boxes: np.ndarray  # [.., K, 4] cxcywh


def build_queries(anchors: AnchorSet, psi: Linear, d_pe: int) -> QuerySet:
    if psi.weight.shape[0] != d_pe + 1:
        raise ShapeError(f"projection expects width {psi.weight.shape[0]}, anchors give {d_pe + 1}")
    if anchors.k == 0:
        raise ValueError("no anchors")
    pe = Tensor(positional_encoding(anchors.cx, anchors.cy, d_pe))
    v = reshape(anchors.scores, anchors.scores.shape + (1,))
    q = psi(concat([pe, v], axis=-1))
    size = np.full(anchors.cx.shape, REF_SIZE)
    ref = np.stack([anchors.cx, anchors.cy, size, size], axis=-1)
    return QuerySet(q, ref)
