import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caries_detr.autograd import Conv2d, Linear, Parameter, Tensor, grad_check, param_grad_check, tsum
from caries_detr.spb import SpbNet, l1_loss, pearson, pretrain_on_arrays, spb_forward, structural_targets
from caries_detr.tsqi import (
    REF_SIZE,
    anchors_from_index,
    build_queries,
    compute_saliency,
    hybrid_scores,
    positional_encoding,
    select_topk,
    semantic_scores,
)
from caries_detr.detector import ToyBackbone


def _zero(module):
    for p in module.parameters().values():
        p.data[:] = 0.0


# -- structure branch ---------------------------------------------------------

def test_zero_spb_gives_half():
    net = SpbNet(8, np.random.default_rng(0))
    _zero(net)
    feat = Tensor(np.random.default_rng(1).normal(size=(2, 8, 5, 5)))
    assert np.all(spb_forward(net, feat).data == 0.0)
    assert np.all(compute_saliency(feat, net).data == 0.5)


@pytest.mark.parametrize("hw", [8, 16])
def test_spb_keeps_spatial_shape(hw):
    net = SpbNet(4, np.random.default_rng(0))
    assert spb_forward(net, Tensor(np.zeros((4, hw, hw)))).shape == (1, hw, hw)


@pytest.mark.parametrize("seed", range(20))
def test_spb_gradient(seed):
    rng = np.random.default_rng(seed)
    net = SpbNet(3, rng, width=4)
    feat = Tensor(rng.normal(size=(2, 3, 4, 4)))
    target = rng.random((2, 4, 4))
    assert grad_check(lambda t: l1_loss(net, t, target), feat) < 1e-4
    errs = param_grad_check(lambda: l1_loss(net, feat, target), net.parameters())
    assert max(errs.values()) < 1e-4


def test_pretraining_freezes_backbone_and_learns():
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (12, 16, 16, 3), dtype=np.uint8)
    images[:, 4:12, 4:12] = 230
    backbone = ToyBackbone(np.random.default_rng(1))
    before = {k: v.tobytes() for k, v in backbone.state_arrays().items()}
    net = SpbNet(backbone.c_feat, np.random.default_rng(2), width=8)
    res = pretrain_on_arrays(images, backbone, net, epochs=15, batch=4, lr=3e-3)
    assert {k: v.tobytes() for k, v in backbone.state_arrays().items()} == before
    assert res.losses[-1] < res.losses[0]


def test_constant_corpus_targets_zero_and_loss_falls():
    images = np.full((6, 16, 16, 3), 120, dtype=np.uint8)
    backbone = ToyBackbone(np.random.default_rng(0))
    assert np.all(structural_targets(images, backbone.stride) == 0.0)
    net = SpbNet(backbone.c_feat, np.random.default_rng(1), width=4)
    res = pretrain_on_arrays(images, backbone, net, epochs=30, batch=6, lr=1e-2)
    assert res.losses[-1] < 0.1 * res.losses[0]


def test_matching_target_is_a_fixed_point():
    backbone = ToyBackbone(np.random.default_rng(0))
    net = SpbNet(backbone.c_feat, np.random.default_rng(1), width=4)
    _zero(net)
    net.conv3.bias.data[:] = -50.0  # sigmoid ~ 0, matching an all-zero target
    images = np.full((1, 16, 16, 3), 90, dtype=np.uint8)
    res = pretrain_on_arrays(images, backbone, net, epochs=1, batch=1)
    assert res.losses[0] == pytest.approx(0.0, abs=1e-20) and res.losses[1] == pytest.approx(0.0, abs=1e-20)


def test_pearson():
    a = np.arange(10.0)
    assert pearson(a, 2 * a + 1) == pytest.approx(1.0)
    assert pearson(a, -a) == pytest.approx(-1.0)


# -- semantic and hybrid scores -----------------------------------------------

def test_semantic_scores_examples():
    head = Conv2d(2, 3, 1, np.random.default_rng(0))
    _zero(head)
    feat = Tensor(np.random.default_rng(1).normal(size=(2, 4, 4)))
    assert np.all(semantic_scores(feat, head).data == 0.5)
    head.bias.data[:] = [-10.0, -10.0, -10.0]
    logits = np.full((3, 4, 4), -10.0)
    logits[1, 2, 3] = 10.0
    s = semantic_scores(feat, head, Tensor(logits)).data
    assert s[2, 3] > 0.9999 and np.argmax(s) == 2 * 4 + 3


def test_hybrid_examples():
    sem, sal = Tensor(np.array([0.5])), Tensor(np.array([0.8]))
    assert hybrid_scores(sem, sal, Tensor(np.array([1.0]))).item() == pytest.approx(0.9, abs=1e-15)
    s = np.random.default_rng(0).random((4, 4))
    p = np.random.default_rng(1).random((4, 4))
    assert np.array_equal(hybrid_scores(Tensor(s), Tensor(p), Tensor(np.array([0.0]))).data, s)


@pytest.mark.parametrize("seed", range(20))
def test_hybrid_lambda_derivative(seed):
    rng = np.random.default_rng(seed)
    s, p = rng.random((3, 3)), rng.random((3, 3))
    lam = Tensor(np.array([rng.normal()]))
    for i in range(3):
        for j in range(3):
            f = lambda t: hybrid_scores(Tensor(s), Tensor(p), t)[i, j]
            lam.grad = None
            lam.requires_grad = True
            f(lam).backward()
            assert abs(lam.grad[0] - s[i, j] * p[i, j]) < 1e-12
            eps = 1e-6
            up = f(Tensor(lam.data + eps)).item()
            dn = f(Tensor(lam.data - eps)).item()
            assert abs((up - dn) / (2 * eps) - s[i, j] * p[i, j]) < 1e-6


@settings(max_examples=50)
@given(st.floats(0.01, 1.0), st.floats(0.0, 0.99), st.floats(0.001, 0.01), st.floats(0.01, 5.0))
def test_hybrid_increasing_in_saliency(sem, p, dp, lam):
    f = lambda q: hybrid_scores(Tensor(np.array([sem])), Tensor(np.array([q])), Tensor(np.array([lam]))).item()
    assert f(p + dp) > f(p)


# -- anchor selection ---------------------------------------------------------

def test_topk_examples():
    m = np.random.default_rng(0).random((4, 4))
    a = select_topk(Tensor(m), 16)
    np.testing.assert_array_equal(a.flat_index, np.argsort(-m.ravel(), kind="stable"))
    peak = np.zeros((5, 6))
    peak[2, 3] = 1.0
    a = select_topk(Tensor(peak), 1)
    assert (int(a.gy[0]), int(a.gx[0])) == (2, 3)
    assert a.cx[0] == pytest.approx(3.5 / 6) and a.cy[0] == pytest.approx(2.5 / 5)
    flat = select_topk(Tensor(np.full((3, 3), 0.2)), 4)
    np.testing.assert_array_equal(flat.flat_index, [0, 1, 2, 3])
    with pytest.raises(ValueError):
        select_topk(Tensor(m), 17)


def test_topk_batched_and_pinned():
    m = Tensor(np.random.default_rng(1).random((2, 3, 3)))
    a = select_topk(m, 4)
    assert a.flat_index.shape == (2, 4)
    b = anchors_from_index(m, a.flat_index)
    np.testing.assert_array_equal(a.scores.data, b.scores.data)


def test_topk_gradient_flows_to_selected_scores_only():
    m = Tensor(np.array([[0.1, 0.9], [0.4, 0.2]]), requires_grad=True)
    a = select_topk(m, 2)
    tsum(a.scores).backward()
    np.testing.assert_array_equal(m.grad, [[0.0, 1.0], [1.0, 0.0]])


# -- positional encoding and queries ------------------------------------------

def test_positional_encoding_examples():
    pe = positional_encoding(0.0, 0.0, 16)
    np.testing.assert_array_equal(pe[0::2], 0.0)
    np.testing.assert_array_equal(pe[1::2], 1.0)
    assert not np.allclose(positional_encoding(0.25, 0.5, 16), positional_encoding(0.5, 0.25, 16))
    np.testing.assert_array_equal(positional_encoding(0.3, 0.7, 16), positional_encoding(0.3, 0.7, 16))
    with pytest.raises(ValueError):
        positional_encoding(0.1, 0.1, 10)


@given(st.floats(0, 1), st.floats(0, 1), st.sampled_from([4, 8, 16, 64]))
def test_positional_encoding_norm(cx, cy, d):
    assert np.linalg.norm(positional_encoding(cx, cy, d)) == pytest.approx(np.sqrt(d / 2), rel=1e-12)


def _anchors(scores, d=8):
    m = Tensor(np.array(scores, dtype=np.float64).reshape(1, -1))
    return select_topk(m, m.shape[-1])


def test_queries_zero_projection():
    psi = Linear(9, 6, np.random.default_rng(0))
    _zero(psi)
    q = build_queries(_anchors([0.3, 0.9, 0.5]), psi, 8)
    assert np.all(q.embeddings.data == 0.0)
    np.testing.assert_array_equal(q.ref_boxes[:, 2:], REF_SIZE)


def test_queries_linear_in_score():
    psi = Linear(9, 6, np.random.default_rng(0))
    m1 = Tensor(np.array([[0.7, 0.1]]))
    m2 = Tensor(np.array([[0.2, 0.1]]))
    idx = np.array([0])
    q1 = build_queries(anchors_from_index(m1, idx), psi, 8).embeddings.data[0]
    q2 = build_queries(anchors_from_index(m2, idx), psi, 8).embeddings.data[0]
    np.testing.assert_allclose(q1 - q2, 0.5 * psi.weight.data[-1], atol=1e-14)


def test_lambda_gradient_through_queries():
    rng = np.random.default_rng(0)
    psi = Linear(9, 4, rng)
    sem, sal = Tensor(rng.random((1, 3, 3))), Tensor(rng.random((1, 3, 3)))
    idx = select_topk(hybrid_scores(sem, sal, Tensor(np.array([1.0]))), 3).flat_index
    target = rng.normal(size=(1, 3, 4))

    def f(lam):
        a = anchors_from_index(hybrid_scores(sem, sal, lam), idx)
        return tsum((build_queries(a, psi, 8).embeddings - Tensor(target)) ** 2.0)

    lam = Parameter(np.array([1.0]))
    f(lam).backward()
    assert abs(lam.grad[0]) > 1e-6
    assert grad_check(f, Tensor(np.array([1.0]))) < 1e-6
