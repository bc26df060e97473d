import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caries_detr.autograd import (
    AdamW,
    CheckpointError,
    Conv2d,
    LayerNorm,
    Linear,
    MissingGradientError,
    Parameter,
    ShapeError,
    Tensor,
    clamp,
    concat,
    conv2d,
    gather,
    grad_check,
    load_checkpoint,
    log_sigmoid,
    matmul,
    max_over_axis,
    maximum,
    minimum,
    no_grad,
    param_grad_check,
    read_header,
    reshape,
    save_checkpoint,
    sigmoid,
    softmax,
    stack,
    swap_last,
    topk_indices,
    transpose,
    tsum,
)
from oracles import conv2d_loops

SEEDS = range(20)


def _positive(rng, shape):
    return Tensor(rng.uniform(0.5, 2.0, shape))


# scalar-valued wrappers around each op; a fixed random projection makes the
# upstream gradient non-uniform
def _proj(rng, y):
    return tsum(y * Tensor(rng.normal(size=y.shape)))


UNARY = {
    "exp": lambda x: x.exp(),
    "log": lambda x: (x * x + 1.0).log(),
    "sqrt": lambda x: (x * x + 1.0).sqrt(),
    "abs": lambda x: x.abs(),
    "sigmoid": sigmoid,
    "log_sigmoid": log_sigmoid,
    "relu": lambda x: x.relu(),
    "pow": lambda x: (x * x + 0.5) ** 1.5,
    "neg": lambda x: -x,
    "clamp": lambda x: clamp(x, -0.3, 0.4),
    "softmax": lambda x: softmax(x, axis=-1),
    "mean0": lambda x: x.mean(axis=0),
    "max1": lambda x: max_over_axis(x, axis=1),
    "reshape": lambda x: reshape(x, (4, 3)),
    "transpose": lambda x: transpose(x, (1, 0)),
    "swap_last": swap_last,
    "getitem": lambda x: x[1:, ::2],
    "gather": lambda x: gather(x, 1, np.array([[0, 3, 3], [1, 1, 2], [2, 0, 0]])),
    "concat": lambda x: concat([x, x * 2.0], axis=0),
    "stack": lambda x: stack([x, x.exp()], axis=-1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_unary_gradients(name, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 4)))
    if name in ("abs", "relu", "clamp"):
        # keep clear of the kinks
        x.data[np.abs(x.data) < 0.05] += 0.1
        x.data[np.abs(x.data - 0.4) < 0.05] += 0.1
        x.data[np.abs(x.data + 0.3) < 0.05] += 0.1
    f = UNARY[name]
    assert grad_check(lambda t: _proj(np.random.default_rng(seed + 100), f(t)), x) < 1e-4


BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "maximum": maximum,
    "minimum": minimum,
    "matmul": lambda a, b: matmul(a, transpose(b, (1, 0))),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_binary_gradients_both_sides(name, seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(3, 4)))
    b = _positive(rng, (3, 4)) if name == "div" else Tensor(rng.normal(size=(3, 4)))
    if name in ("maximum", "minimum"):
        b.data[np.abs(a.data - b.data) < 0.05] += 0.2
    f = BINARY[name]
    proj = lambda y: _proj(np.random.default_rng(seed + 7), y)
    assert grad_check(lambda t: proj(f(t, b)), a) < 1e-4
    assert grad_check(lambda t: proj(f(a, t)), b) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_broadcast_gradient_shapes(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(2, 3, 4)))
    b = Tensor(rng.normal(size=(4,)))
    c = Tensor(rng.normal(size=(3, 1)))
    assert grad_check(lambda t: _proj(np.random.default_rng(seed), a * t + c), b) < 1e-4
    assert grad_check(lambda t: _proj(np.random.default_rng(seed), a * b + t), c) < 1e-4
    for t in (a, b, c):
        t.requires_grad = True
        t.grad = None
    y = tsum(a * b + c)
    y.backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape and c.grad.shape == c.shape


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride,padding,mode", [(1, 1, "zero"), (2, 1, "zero"), (1, 1, "replicate"), (1, 0, "zero")])
def test_conv2d_gradients(seed, stride, padding, mode):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 2, 6, 5)))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    b = Tensor(rng.normal(size=(3,)))
    proj = lambda y: _proj(np.random.default_rng(seed + 1), y)
    conv = lambda x_, w_, b_: conv2d(x_, w_, b_, stride=stride, padding=padding, padding_mode=mode)
    assert grad_check(lambda t: proj(conv(t, w, b)), x) < 1e-4
    assert grad_check(lambda t: proj(conv(x, t, b)), w) < 1e-4
    assert grad_check(lambda t: proj(conv(x, w, t)), b) < 1e-4


def test_elementwise_examples():
    np.testing.assert_array_equal((Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])).data, [4.0, 6.0])
    x = np.random.default_rng(0).normal(size=7)
    assert np.array_equal((Tensor(x) * 1.0).data, x)
    a = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    b = np.array([0.5, 4.0, -1.0])
    tsum(a * Tensor(b)).backward()
    np.testing.assert_array_equal(a.grad, b)


def test_matmul_examples():
    x = np.random.default_rng(1).normal(size=(3, 4))
    np.testing.assert_array_equal(matmul(Tensor(np.eye(3)), Tensor(x)).data, x)
    np.testing.assert_array_equal(matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]])).data, [[3.0], [7.0]])
    rng = np.random.default_rng(2)
    a, b = Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=(5, 3)))
    assert grad_check(lambda t: _proj(np.random.default_rng(3), matmul(t, b)), a) < 1e-6
    with pytest.raises(ShapeError):
        matmul(a, a)


def test_activation_examples():
    assert sigmoid(Tensor(0.0)).item() == 0.5
    np.testing.assert_allclose(softmax(Tensor(np.full(5, 3.2))).data, np.full(5, 0.2), atol=1e-15)
    np.testing.assert_array_equal(topk_indices([0.1, 0.9, 0.4], 2), [1, 2])
    np.testing.assert_array_equal(topk_indices([0.5, 0.5, 0.5, 0.9], 3), [3, 0, 1])
    # large-magnitude inputs stay finite
    assert np.all(np.isfinite(log_sigmoid(Tensor(np.array([-800.0, 800.0]))).data))


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 5, 5))
    np.testing.assert_array_equal(conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data, x)


@pytest.mark.parametrize("seed", range(10))
def test_conv_matches_loops(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 8, 8))
    w = rng.normal(size=(2, 3, 3, 3))
    b = rng.normal(size=2)
    for stride, pad, mode in [(1, 1, "zero"), (2, 1, "zero"), (1, 1, "replicate"), (1, 0, "zero")]:
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad, padding_mode=mode).data
        np.testing.assert_allclose(got, conv2d_loops(x, w, b, stride, pad, mode), rtol=0, atol=1e-12)


def test_conv_batched_equals_per_image():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 2, 7, 7))
    w = rng.normal(size=(3, 2, 3, 3))
    batched = conv2d(Tensor(x), Tensor(w), padding=1).data
    for i in range(4):
        np.testing.assert_allclose(batched[i], conv2d(Tensor(x[i]), Tensor(w), padding=1).data, atol=1e-13)


def test_shape_errors():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 3)))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        grad_check(lambda t: t * 2.0, Tensor(np.ones(3)))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).exp()
    assert not y.requires_grad
    z = tsum(x * 2.0)
    z.backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([1.5, -0.5]), requires_grad=True)
    tsum(x * x + x).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_a_distribution(vals):
    p = softmax(Tensor(np.array(vals))).data
    assert np.all(p >= 0) and abs(p.sum() - 1.0) < 1e-12


@given(st.floats(-700, 700))
def test_sigmoid_symmetry(v):
    s = sigmoid(Tensor(np.array([v, -v]))).data
    assert abs(s[0] + s[1] - 1.0) < 1e-12


# -- layers -------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_layer_gradients(seed):
    rng = np.random.default_rng(seed)
    lin = Linear(4, 3, rng)
    conv = Conv2d(2, 3, 3, rng, padding=1)
    ln = LayerNorm(4)
    ln.gain.data[:] = rng.normal(size=4)
    ln.shift.data[:] = rng.normal(size=4)
    x = Tensor(rng.normal(size=(5, 4)))
    img = Tensor(rng.normal(size=(2, 5, 5)))
    proj = lambda y: _proj(np.random.default_rng(seed), y)
    assert grad_check(lambda t: proj(lin(t)), x) < 1e-4
    assert grad_check(lambda t: proj(ln(t)), x) < 1e-4
    assert grad_check(lambda t: proj(conv(t)), img) < 1e-4
    for module, inputs in ((lin, x), (ln, x), (conv, img)):
        errs = param_grad_check(lambda: proj(module(inputs)), module.parameters())
        assert max(errs.values()) < 1e-4


def test_module_parameter_names():
    rng = np.random.default_rng(0)
    lin = Linear(2, 3, rng)
    names = set(lin.parameters())
    assert names == {"weight", "bias"}
    arrays = lin.state_arrays()
    arrays["weight"][:] = 0.0
    assert np.any(lin.weight.data != 0.0)
    lin.load_arrays(arrays)
    assert np.all(lin.weight.data == 0.0)
    with pytest.raises((KeyError, ValueError)):
        lin.load_arrays({"weight": arrays["weight"]})


# -- optimizer ----------------------------------------------------------------

def test_adamw_hand_step():
    p = Parameter(np.array([0.7]))
    p.grad = np.array([0.3])
    lr, wd, b1, b2, eps = 0.01, 0.1, 0.9, 0.999, 1e-8
    AdamW({"p": p}, lr=lr, weight_decay=wd, betas=(b1, b2), eps=eps).step()
    m = (1 - b1) * 0.3 / (1 - b1)
    v = (1 - b2) * 0.09 / (1 - b2)
    expected = 0.7 * (1 - lr * wd) - lr * m / (math.sqrt(v) + eps)
    assert abs(p.data[0] - expected) < 1e-12


def test_adamw_two_hand_steps():
    p = Parameter(np.array([-1.2]))
    opt = AdamW({"p": p}, lr=0.05, weight_decay=0.01)
    x, m, v = -1.2, 0.0, 0.0
    for t, g in enumerate([0.4, -0.25], start=1):
        p.grad = np.array([g])
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x * (1 - 0.05 * 0.01) - 0.05 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert abs(p.data[0] - x) < 1e-12


def test_adamw_zero_grad_zero_decay_is_noop():
    p = Parameter(np.array([1.0, -2.0, 3.0]))
    p.grad = np.zeros(3)
    AdamW({"p": p}, lr=0.1, weight_decay=0.0).step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])


def test_adamw_quadratic_bowl():
    p = Parameter(np.array([3.0]))
    opt = AdamW({"p": p}, lr=0.05, weight_decay=0.0)
    for _ in range(500):
        p.grad = 2.0 * p.data
        opt.step()
    assert abs(p.data[0]) < 1e-3


def test_adamw_missing_gradient_names_param():
    p = Parameter(np.ones(2))
    with pytest.raises(MissingGradientError, match="lonely"):
        AdamW({"lonely": p}).step()


# -- checkpoint ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a.weight": rng.normal(size=(3, 4)), "b": rng.normal(size=5), "s": np.array([np.pi])}
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, arrays, optimizer={"lr": 1e-3}, meta={"kind": "test"})
    back, header = load_checkpoint(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert np.array_equal(back[k], arrays[k])
    assert header["optimizer"]["lr"] == 1e-3
    assert header["payload_offset"] % 8 == 0
    assert read_header(path)["names"] == list(arrays)
    raw = path.read_bytes()
    payload = np.frombuffer(raw[header["payload_offset"]:], dtype="<f8")
    assert payload.size == 12 + 5 + 1


def test_checkpoint_rejects_truncation(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"w": np.ones(10)})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"not a checkpoint\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


@settings(max_examples=25, deadline=None)
@given(st.dictionaries(st.text("abcxyz._", min_size=1, max_size=8),
                       st.lists(st.floats(allow_nan=False), min_size=0, max_size=6), min_size=1, max_size=4))
def test_checkpoint_round_trip_property(tmp_path_factory, arrays):
    path = tmp_path_factory.mktemp("ck") / "p.ckpt"
    arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    save_checkpoint(path, arrays)
    back, _ = load_checkpoint(path)
    for k, v in arrays.items():
        assert back[k].tobytes() == v.tobytes()
