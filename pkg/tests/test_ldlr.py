import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from caries_detr.autograd import Tensor, grad_check, tsum
from caries_detr.boxes import cxcywh_to_xyxy, giou_tensor, pairwise_iou_giou, xyxy_to_cxcywh
from caries_detr.ldlr import (
    FocalConfig,
    SensitivityConfig,
    box_iou,
    focal_loss,
    giou,
    hardness_weight,
    l1_box_loss,
    quality_vector,
    total_loss,
)

unit = st.floats(0.0, 1.0)


def _c(xyxy):
    return xyxy_to_cxcywh(np.array(xyxy, dtype=np.float64))


def test_hardness_weight_examples():
    assert hardness_weight(1.0, 0.7) == 1.0
    assert hardness_weight(0.0, 2.0) == 3.0
    assert hardness_weight(0.5, 1.0) == 1.5
    with pytest.raises(ValueError):
        hardness_weight(0.5, -1.0)


@given(unit, unit, st.floats(0.01, 5.0))
def test_hardness_weight_bounds_and_monotone(q1, q2, eta):
    w1, w2 = hardness_weight(q1, eta), hardness_weight(q2, eta)
    assert 1.0 <= w1 <= 1.0 + eta
    # strict in exact arithmetic; skip pairs closer than float resolution
    if q2 - q1 > 1e-9:
        assert w1 > w2


def test_giou_unit_values():
    assert giou(_c([0, 0, 2, 2]), _c([0, 0, 2, 2])) == pytest.approx(1.0, abs=1e-12)
    assert abs(giou(_c([0, 0, 2, 2]), _c([1, 1, 3, 3])) - (-5 / 63)) < 1e-9
    assert abs(giou(_c([0, 0, 1, 1]), _c([2, 0, 3, 1])) - (-1 / 3)) < 1e-9
    assert abs(box_iou(_c([0, 0, 2, 2]), _c([1, 1, 3, 3])) - 1 / 7) < 1e-12


@given(st.lists(unit, min_size=8, max_size=8))
def test_giou_range_and_symmetry(v):
    a = np.array([min(v[0], v[1]), min(v[2], v[3]), max(v[0], v[1]) + 0.01, max(v[2], v[3]) + 0.01])
    b = np.array([min(v[4], v[5]), min(v[6], v[7]), max(v[4], v[5]) + 0.01, max(v[6], v[7]) + 0.01])
    iou, g = pairwise_iou_giou(a[None], b[None])
    iou2, g2 = pairwise_iou_giou(b[None], a[None])
    assert -1.0 <= g[0, 0] <= iou[0, 0] + 1e-12 and iou[0, 0] <= 1.0
    assert g[0, 0] == pytest.approx(g2[0, 0], abs=1e-12) and iou[0, 0] == pytest.approx(iou2[0, 0], abs=1e-12)


def test_box_conversions_round_trip():
    b = np.random.default_rng(0).random((10, 4))
    np.testing.assert_allclose(xyxy_to_cxcywh(cxcywh_to_xyxy(b)), b, atol=1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_giou_tensor_gradient(seed):
    rng = np.random.default_rng(seed)
    pred = Tensor(np.column_stack([rng.uniform(0.3, 0.7, (3, 2)), rng.uniform(0.1, 0.4, (3, 2))]))
    gt = np.column_stack([rng.uniform(0.3, 0.7, (3, 2)), rng.uniform(0.1, 0.4, (3, 2))])
    assert grad_check(lambda t: tsum(giou_tensor(t, gt)), pred) < 1e-4


def test_focal_examples():
    big = 40.0
    assert focal_loss(Tensor(np.array([[big, -big, -big]])), [0]).item() < 1e-30
    p = 0.9
    got = focal_loss(Tensor(np.array([math.log(p / (1 - p))])), [0], 0.25, 2.0).item()
    assert got == pytest.approx(0.25 * 0.1**2 * -math.log(0.9), rel=1e-12)
    assert got == pytest.approx(2.634e-4, abs=5e-8)


@pytest.mark.parametrize("seed", range(20))
def test_focal_reduces_to_half_bce(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 3, (4, 3))
    target = rng.integers(-1, 3, 4)
    onehot = np.zeros((4, 3))
    for i, t in enumerate(target):
        if t >= 0:
            onehot[i, t] = 1.0
    p = 1 / (1 + np.exp(-z))
    bce = -(onehot * np.log(p) + (1 - onehot) * np.log(1 - p)).sum()
    assert focal_loss(Tensor(z), target, alpha=0.5, gamma=0.0).item() == pytest.approx(0.5 * bce, abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_focal_gradient(seed):
    rng = np.random.default_rng(seed)
    z = Tensor(rng.normal(0, 2, (5, 3)))
    target = rng.integers(-1, 3, 5)
    assert grad_check(lambda t: focal_loss(t, target), z) < 1e-4


def test_l1_examples():
    a = np.array([0.5, 0.5, 0.2, 0.2])
    b = a + np.array([0.1, 0, 0, 0])
    assert l1_box_loss(Tensor(a), a).item() == 0.0
    assert l1_box_loss(Tensor(a), b).item() == pytest.approx(0.1, abs=1e-15)
    assert l1_box_loss(Tensor(a), b).item() == l1_box_loss(Tensor(b), a).item()


def test_quality_vector_examples():
    box = np.array([0.4, 0.4, 0.2, 0.2])
    q = quality_vector(0.83, box, box)
    assert (q.q_cls, q.q_bbox, q.q_iou) == (0.83, 1.0, 1.0)
    q = quality_vector(0.5, _c([0, 0, 2, 2]), _c([1, 1, 3, 3]))
    assert q.q_iou == pytest.approx(1 / 7, abs=1e-12)


def _logit(p):
    return math.log(p / (1 - p))


def test_total_loss_zero_sensitivity_is_plain_detr_loss():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=(4, 3)))
    boxes = Tensor(np.column_stack([rng.uniform(0.3, 0.7, (4, 2)), rng.uniform(0.1, 0.3, (4, 2))]))
    gtb = np.column_stack([rng.uniform(0.3, 0.7, (2, 2)), rng.uniform(0.1, 0.3, (2, 2))])
    gtc = np.array([1, 2])
    pairs = [(2, 0), (0, 1)]
    loss, br = total_loss(pairs, logits, boxes, gtb, gtc, SensitivityConfig(0, 0, 0))
    fl = sum(focal_loss(logits[q], [int(gtc[g])]).item() for q, g in pairs)
    fl += sum(focal_loss(logits[q], [-1]).item() for q in (1, 3))
    l1 = sum(np.abs(boxes.data[q] - gtb[g]).sum() for q, g in pairs)
    gi = sum(1 - giou(boxes.data[q], gtb[g]) for q, g in pairs)
    assert loss.item() == pytest.approx(fl + l1 + gi, abs=1e-12)
    assert np.all(br.w_cls == 1) and np.all(br.w_bbox == 1) and np.all(br.w_iou == 1)


def test_total_loss_perfect_match_is_focal_only():
    box = np.array([[0.5, 0.5, 0.2, 0.3]])
    logits = Tensor(np.array([[_logit(0.8)]]))
    loss, br = total_loss([(0, 0)], logits, Tensor(box), box, np.array([0]))
    assert br.bbox == 0.0 and br.giou == pytest.approx(0.0, abs=1e-15)
    expected = 1.2 * 0.25 * 0.2**2 * -math.log(0.8)
    assert loss.item() == pytest.approx(expected, rel=1e-12)


def test_total_loss_hand_case():
    pred = _c([0, 0, 2, 2]) / 3.0
    gt = _c([1, 1, 3, 3]) / 3.0
    loss, _ = total_loss([(0, 0)], Tensor(np.array([[_logit(0.9)]])), Tensor(pred[None]), gt[None], np.array([0]))
    focal = 0.25 * 0.01 * -math.log(0.9)
    l1 = 2 / 3
    expected = (1 + 0.1) * focal + (2 - math.exp(-l1)) * l1 + (2 - 1 / 7) * (1 + 5 / 63)
    assert loss.item() == pytest.approx(expected, abs=1e-12)


@given(st.floats(0.0, 0.4))
def test_worse_iou_never_lowers_loss(shift):
    gt = np.array([[0.5, 0.5, 0.2, 0.2]])
    logits = Tensor(np.array([[0.3, -1.0]]))
    base, _ = total_loss([(0, 0)], logits, Tensor(gt + np.array([0.02, 0, 0, 0])), gt, np.array([0]))
    worse, _ = total_loss([(0, 0)], logits, Tensor(gt + np.array([0.02 + shift, 0, 0, 0])), gt, np.array([0]))
    assert worse.item() >= base.item() - 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_total_loss_gradient_with_pinned_weights(seed):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.normal(size=(5, 3)))
    boxes = Tensor(np.column_stack([rng.uniform(0.3, 0.7, (5, 2)), rng.uniform(0.1, 0.3, (5, 2))]))
    gtb = np.column_stack([rng.uniform(0.3, 0.7, (3, 2)), rng.uniform(0.1, 0.3, (3, 2))])
    gtc = rng.integers(0, 3, 3)
    pairs = [(4, 0), (1, 1), (2, 2)]
    _, br = total_loss(pairs, logits, boxes, gtb, gtc)
    w = (br.w_cls, br.w_bbox, br.w_iou)
    assert grad_check(lambda t: total_loss(pairs, t, boxes, gtb, gtc, weights=w)[0], logits) < 1e-4
    assert grad_check(lambda t: total_loss(pairs, logits, t, gtb, gtc, weights=w)[0], boxes) < 1e-4


def test_weights_are_detached():
    gt = np.array([[0.5, 0.5, 0.2, 0.2]])
    logits = Tensor(np.array([[0.0]]), requires_grad=True)
    boxes = Tensor(gt + 0.05, requires_grad=True)
    loss, br = total_loss([(0, 0)], logits, boxes, gt, np.array([0]))
    loss.backward()
    pinned, _ = total_loss([(0, 0)], logits, boxes, gt, np.array([0]), weights=(br.w_cls, br.w_bbox, br.w_iou))
    g1 = boxes.grad.copy()
    boxes.grad = None
    pinned.backward()
    np.testing.assert_array_equal(boxes.grad, g1)


def test_sensitivity_validation():
    with pytest.raises(ValueError):
        SensitivityConfig(eta_cls=-0.1)
    FocalConfig(0.25, 2.0)
