import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phonation import autodiff as ad
from phonation.autodiff import AdamState, Tape, Tensor, adam_step
from phonation.autodiff.ops import interpolation_matrix, softmax
from gradcheck import RTOL, check


def _weighted(op, shape_rng=None):
    """Wrap ``op`` so its output is reduced by a fixed random projection."""
    cache = {}

    def fn(*ts):
        out = op(*ts)
        if "w" not in cache:
            cache["w"] = np.random.default_rng(99).normal(size=out.shape)
        return ad.total(ad.mul(out, Tensor(cache["w"])))
    return fn


# ---- conv2d


def test_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 4))
    y = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(y.data, x)


def test_ones_kernel_sums():
    y = ad.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert y.shape == (1, 1, 3, 3) and np.all(y.data == 9)


def _conv_oracle(x, k, b, pad):
    """Direct cross-correlation loops."""
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad[0], pad[0]), (pad[1], pad[1])))
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    y = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            y[:, :, i, j] = np.einsum("ncij,ocij->no", xp[:, :, i:i + kh, j:j + kw], k) + b
    return y


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), c=st.integers(1, 3), o=st.integers(1, 3),
       kh=st.integers(1, 5), kw=st.integers(1, 3), pad=st.sampled_from([(0, 0), (1, 0), (2, 1)]))
def test_conv_matches_loops(seed, c, o, kh, kw, pad):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, c, 7, 5))
    k = rng.normal(size=(o, c, kh, kw))
    b = rng.normal(size=o)
    y = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), padding=pad)
    np.testing.assert_allclose(y.data, _conv_oracle(x, k, b, pad), rtol=1e-12, atol=1e-12)


def test_conv_gradient_small(rng):
    x, k, b = rng.normal(size=(2, 1, 4, 3)), rng.normal(size=(2, 1, 3, 1)), rng.normal(size=2)
    assert check(_weighted(ad.conv2d), [x, k, b], rng) <= RTOL


def test_conv_gradient_padded(rng):
    x, k, b = rng.normal(size=(2, 3, 8, 6)), rng.normal(size=(4, 3, 5, 3)), rng.normal(size=4)
    fn = _weighted(lambda x, k, b: ad.conv2d(x, k, b, padding=(2, 1)))
    assert check(fn, [x, k, b], rng) <= RTOL


def test_conv_rejects_fractional_stride():
    with pytest.raises(ValueError):
        ad.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)), stride=2)


# ---- maxpool


def test_pool_single_window():
    assert ad.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data.item() == 4.0


def test_pool_ties_route_to_first():
    x = Tensor(np.ones((1, 2, 4, 6)), requires_grad=True)
    with Tape() as tape:
        loss = ad.total(ad.maxpool2d(x))
    tape.backward(loss)
    expected = np.zeros((4, 6))
    expected[::2, ::2] = 1
    assert np.all(x.grad == expected)


def test_pool_gradient(rng):
    x = rng.permutation(np.arange(2 * 3 * 6 * 4, dtype=np.float64)).reshape(2, 3, 6, 4) * 0.01
    assert check(_weighted(ad.maxpool2d), [x], rng) <= RTOL


# ---- upsample


def test_upsample_identity(rng):
    x = rng.normal(size=(1, 2, 3, 4))
    np.testing.assert_array_equal(ad.upsample_bilinear(Tensor(x), (3, 4)).data, x)


def test_upsample_single_point():
    y = ad.upsample_bilinear(Tensor(np.full((1, 1, 1, 1), 2.5)), (5, 7))
    assert np.all(y.data == 2.5)


def test_upsample_centre_is_corner_mean():
    x = np.array([[[[1.0, 2.0], [3.0, 7.0]]]])
    y = ad.upsample_bilinear(Tensor(x), (3, 3)).data[0, 0]
    assert y[1, 1] == pytest.approx(x.mean(), abs=1e-15)
    np.testing.assert_array_equal(y[[0, 0, 2, 2], [0, 2, 0, 2]], x.ravel())


def test_interpolation_rows_sum_to_one():
    for src, dst in [(2, 3), (3, 12), (6, 12), (32, 128)]:
        R = interpolation_matrix(src, dst)
        np.testing.assert_allclose(R.sum(axis=1), 1.0, atol=1e-14)
        assert R[0, 0] == 1 and R[-1, -1] == 1


def test_upsample_gradient(rng):
    x = rng.normal(size=(2, 2, 3, 2))
    assert check(_weighted(lambda t: ad.upsample_bilinear(t, (7, 5))), [x], rng) <= RTOL


# ---- dense, activations


def test_dense_identity(rng):
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(ad.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)


def test_sigmoid_zero():
    assert ad.sigmoid(Tensor(np.zeros(3))).data.tolist() == [0.5] * 3


def test_sigmoid_stays_inside_unit_interval():
    y = ad.sigmoid(Tensor(np.array([-1e4, -800.0, -40.0, 40.0, 800.0, 1e4]))).data
    assert np.all(y > 0) and np.all(y < 1)
    y32 = ad.sigmoid(Tensor(np.array([-200.0, 200.0], dtype=np.float32))).data
    assert y32.dtype == np.float32 and np.all(y32 > 0) and np.all(y32 < 1)


def test_relu_nonnegative(rng):
    assert np.all(ad.relu(Tensor(rng.normal(size=100))).data >= 0)


@pytest.mark.parametrize("op,shapes", [
    ("dense", [(3, 5), (5, 4), (4,)]),
    ("relu", [(4, 6)]),
    ("sigmoid", [(4, 6)]),
    ("mul", [(3, 4), (3, 4)]),
    ("add", [(3, 4), (3, 4)]),
    ("flatten", [(2, 3, 4, 2)]),
])
def test_primitive_gradients(op, shapes, rng):
    arrays = [rng.normal(size=s) for s in shapes]
    if op == "relu":
        arrays[0] = np.where(np.abs(arrays[0]) < 1e-3, 0.5, arrays[0])
    fn = _weighted(getattr(ad, op))
    assert check(fn, arrays, rng) <= RTOL


def test_scalar_ops_gradients(rng):
    x = rng.normal(size=(3, 3))
    assert check(_weighted(lambda t: ad.scale(ad.add_scalar(t, 1.0), -2.5)), [x], rng) <= RTOL
    assert check(_weighted(lambda t: ad.reshape(t, (9,))), [x], rng) <= RTOL


# ---- loss


def test_uniform_logits_loss():
    loss = ad.softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 2])
    assert loss.data.item() == pytest.approx(np.log(4), abs=1e-15)


def test_saturated_loss():
    logits = np.zeros((2, 4))
    logits[[0, 1], [2, 3]] = 100.0
    assert ad.softmax_cross_entropy(Tensor(logits), [2, 3]).data.item() < 1e-10


def test_cross_entropy_gradient(rng):
    labels = rng.integers(0, 4, 6)
    assert check(lambda t: ad.softmax_cross_entropy(t, labels), [rng.normal(size=(6, 4)) * 3], rng) <= RTOL


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        ad.softmax_cross_entropy(Tensor(np.zeros((2, 4))), [0, 4])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(1e-3, 1e3))
def test_softmax_rows_sum_to_one(seed, scale):
    p = softmax(np.random.default_rng(seed).normal(size=(5, 4)) * scale)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)


# ---- tape


def test_sum_grad_is_ones(rng):
    x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = ad.total(x)
    tape.backward(loss)
    assert np.all(x.grad == 1)


def test_square_grad(rng):
    x = Tensor(rng.normal(size=(5,)), requires_grad=True)
    with Tape() as tape:
        loss = ad.total(ad.mul(x, x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_tape_is_topological(rng):
    x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    with Tape() as tape:
        a = ad.relu(x)
        b = ad.mul(a, x)
        ad.total(ad.add(a, b))
    seen = {id(x)}
    for node in tape.nodes:
        assert all(id(i) in seen or not i.tracked for i in node.inputs)
        seen.add(id(node.output))


def test_nothing_recorded_without_tape(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    assert ad.relu(x).node is None


def test_backward_rejects_foreign_and_vector_loss(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    with Tape() as t1:
        y = ad.relu(x)
        s = ad.total(y)
    with Tape() as t2:
        pass
    with pytest.raises(ValueError):
        t1.backward(y)
    with pytest.raises(ValueError):
        t2.backward(s)


def test_unreached_param_gets_zero_grad(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    unused = Tensor(rng.normal(size=2), requires_grad=True)
    with Tape() as tape:
        loss = ad.total(x)
    tape.backward(loss, [x, unused])
    assert np.all(unused.grad == 0)


# ---- Adam


def test_adam_zero_grad_no_decay_is_noop(rng):
    p = Tensor(rng.normal(size=4), requires_grad=True)
    before = p.data.copy()
    state = AdamState.for_params([p], weight_decay=0.0)
    adam_step([p], state, 1e-3, [np.zeros(4)])
    np.testing.assert_array_equal(p.data, before)


def test_adam_first_step_is_signed_lr(rng):
    p = Tensor(np.zeros(6), requires_grad=True)
    g = rng.normal(size=6)
    state = AdamState.for_params([p], weight_decay=0.0)
    adam_step([p], state, 1e-3, [g])
    # m_hat = g, v_hat = g**2, so the move is -lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(p.data, -1e-3 * np.sign(g), rtol=1e-6)


def _scalar_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=1e-4):
    m = v = 0.0
    traj = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * wd * p
        p = p - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
        traj.append(p)
    return traj


def test_adam_matches_scalar_oracle():
    p = Tensor(np.array([0.7]), requires_grad=True)
    state = AdamState.for_params([p])
    traj = []
    for _ in range(100):
        adam_step([p], state, 1e-3, [np.array([1.0])])
        traj.append(p.data[0])
    np.testing.assert_allclose(traj, _scalar_adam(0.7, [1.0] * 100, 1e-3), rtol=0, atol=1e-12)
    assert state.step == 100
