import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import vtlab.tensor as tt
from vtlab.tensor import Tensor, NumericsError, ShapeError

from conftest import check_grads, rel_err

SEEDS = [0, 1, 2, 3, 4]


def _r(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


# ---------------------------------------------------------------------------
# forward semantics


def test_tensor_invariants():
    t = Tensor(np.ones((2, 3)), requires_grad=True)
    assert t.shape == (2, 3)
    assert t.grad.shape == t.shape
    assert Tensor(np.ones(3)).grad is None


def test_dtype_construction():
    assert Tensor(np.ones(3, dtype=np.float64)).dtype == np.float64
    assert Tensor([1, 2, 3]).dtype == np.float32


def test_reshape_permute_roundtrip(rng):
    x = rng.standard_normal((2, 3, 4))
    assert np.array_equal(tt.reshape(tt.reshape(Tensor(x), (6, 4)), (2, 3, 4)).data, x)
    y = tt.permute(tt.permute(Tensor(x), (2, 0, 1)), (1, 2, 0))
    assert np.array_equal(y.data, x)


@given(st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_softmax_rows_sum_to_one(seed):
    x = Tensor(_r(seed, 3, 7) * 5)
    s = tt.softmax(x).data
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-5)
    assert (s >= 0).all()


@given(st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_matmul_matches_numpy(seed):
    a, b = _r(seed, 2, 3, 4), _r(seed + 1, 4, 5)
    got = tt.matmul(Tensor(a), Tensor(b)).data
    assert np.allclose(got, a @ b, atol=1e-5)


def test_layer_norm_statistics(rng):
    x = rng.standard_normal((4, 9))
    g, b = np.ones(9), np.zeros(9)
    y = tt.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-5)
    assert np.allclose(y.var(axis=-1), 1.0, atol=1e-3)


def test_gelu_reference_values():
    # gelu(0) = 0; large positive ~ identity; large negative ~ 0
    x = Tensor(np.array([0.0, 6.0, -6.0]))
    y = tt.gelu(x).data
    assert abs(y[0]) < 1e-7 and abs(y[1] - 6.0) < 1e-4 and abs(y[2]) < 1e-4


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((4, 10)))
    loss = tt.cross_entropy(logits, np.array([0, 3, 5, 9]))
    assert abs(float(loss.data) - np.log(10)) < 1e-6


@pytest.mark.filterwarnings("ignore:overflow")
def test_nonfinite_raises():
    big = Tensor(np.array([1e300]), dtype=np.float64)
    with pytest.raises(NumericsError):
        tt.mul(big, big)


def test_shape_mismatch_message():
    with pytest.raises(ShapeError) as ei:
        tt.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    assert "3" in str(ei.value) and "4" in str(ei.value)


def test_dropout_deterministic_and_scaling():
    x = Tensor(np.ones((100, 100)))
    a = tt.dropout(x, 0.5, seed=7).data
    b = tt.dropout(x, 0.5, seed=7).data
    assert np.array_equal(a, b)
    kept = a != 0
    assert np.allclose(a[kept], 2.0)
    assert 0.4 < kept.mean() < 0.6
    assert np.array_equal(tt.dropout(x, 0.0, seed=1).data, x.data)


def test_conv3d_matches_naive_loop(rng):
    x = rng.standard_normal((2, 4, 5, 5, 3))
    w = rng.standard_normal((2, 3, 3, 3, 4))
    b = rng.standard_normal(4)
    got = tt.conv3d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                    Tensor(b, dtype=np.float64), stride=(1, 2, 2), padding=(0, 1, 1)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (0, 0)))
    to, ho, wo = 3, 3, 3
    ref = np.zeros((2, to, ho, wo, 4))
    for n in range(2):
        for t in range(to):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, t:t + 2, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                    ref[n, t, i, j] = np.einsum("thwc,thwco->o", patch, w) + b
    assert rel_err(got, ref) < 1e-6


def test_conv3d_depthwise_groups(rng):
    x = rng.standard_normal((1, 3, 4, 4, 6))
    w = rng.standard_normal((3, 3, 3, 1, 6))
    got = tt.conv3d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                    padding=1, groups=6).data
    for c in range(6):
        ref = tt.conv3d(Tensor(x[..., c:c + 1], dtype=np.float64),
                        Tensor(w[..., c:c + 1], dtype=np.float64), padding=1).data
        assert rel_err(got[..., c], ref[..., 0]) < 1e-10


# ---------------------------------------------------------------------------
# gradients: finite differences at float64, >= 5 seeds each


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_elementwise(seed):
    a, b = _r(seed, 3, 4), _r(seed + 10, 3, 4)
    check_grads(lambda x, y: tt.sum_(tt.mul(tt.add(x, y), tt.sub(x, y))), [a, b])
    check_grads(lambda x: tt.sum_(tt.neg(x)), [a])
    check_grads(lambda x: tt.sum_(tt.gelu(x)), [a])
    # keep relu inputs away from the kink
    c = a + np.sign(a) * 0.5
    check_grads(lambda x: tt.sum_(tt.relu(x)), [c])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_matmul_linear(seed):
    a, b = _r(seed, 2, 3, 4), _r(seed + 1, 4, 5)
    check_grads(lambda x, y: tt.sum_(tt.matmul(x, y)), [a, b])
    w, bias = _r(seed + 2, 4, 6), _r(seed + 3, 6)
    check_grads(lambda x, ww, bb: tt.sum_(tt.mul(tt.linear(x, ww, bb),
                                                 tt.linear(x, ww, bb))),
                [a, w, bias])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_broadcast_add(seed):
    a, b = _r(seed, 4, 3, 5), _r(seed + 1, 1, 1, 5)
    check_grads(lambda x, y: tt.sum_(tt.mul(tt.add(x, y), tt.add(x, y))), [a, b])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_shape_ops(seed):
    a = _r(seed, 2, 3, 4)
    check_grads(lambda x: tt.sum_(tt.mul(tt.reshape(x, (6, 4)), tt.reshape(x, (6, 4)))), [a])
    check_grads(lambda x: tt.sum_(tt.mul(tt.permute(x, (2, 0, 1)), tt.permute(x, (2, 0, 1)))), [a])
    check_grads(lambda x: tt.sum_(tt.mul(tt.roll(x, (1, 2), (0, 2)), tt.roll(x, (1, 2), (0, 2)))), [a])
    check_grads(lambda x: tt.sum_(tt.mul(tt.pad(x, ((0, 0), (1, 1), (2, 0))),
                                         tt.pad(x, ((0, 0), (1, 1), (2, 0))))), [a])
    sl = (slice(0, 2), slice(1, 3), slice(0, 4, 2))
    check_grads(lambda x: tt.sum_(tt.mul(tt.slice_(x, sl), tt.slice_(x, sl))), [a])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_concat_gather(seed):
    a, b = _r(seed, 2, 3), _r(seed + 1, 4, 3)
    check_grads(lambda x, y: tt.sum_(tt.mul(tt.concat([x, y], axis=0),
                                            tt.concat([x, y], axis=0))), [a, b])
    idx = np.random.default_rng(seed).integers(0, 5, size=7)
    c = _r(seed + 2, 5, 3)
    check_grads(lambda x: tt.sum_(tt.mul(tt.gather(x, idx), tt.gather(x, idx))), [c])


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_reductions_normalizations(seed):
    a = _r(seed, 3, 6)
    check_grads(lambda x: tt.sum_(tt.mul(tt.mean(x, axis=1, keepdims=True), x)), [a])
    check_grads(lambda x: tt.sum_(tt.mul(tt.softmax(x), tt.softmax(x))), [a])
    check_grads(lambda x: tt.sum_(tt.mul(tt.log_softmax(x), tt.log_softmax(x))), [a])
    g, b = _r(seed + 1, 6), _r(seed + 2, 6)
    check_grads(lambda x, gg, bb: tt.sum_(tt.mul(tt.layer_norm(x, gg, bb),
                                                 tt.layer_norm(x, gg, bb))),
                [a, g, b], tol=2e-4)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv3d(seed):
    x = _r(seed, 1, 3, 4, 4, 2)
    w = _r(seed + 1, 2, 2, 2, 2, 3)
    b = _r(seed + 2, 3)
    check_grads(lambda xx, ww, bb: tt.sum_(
        tt.mul(tt.conv3d(xx, ww, bb, stride=(1, 2, 1), padding=(1, 0, 1)),
               tt.conv3d(xx, ww, bb, stride=(1, 2, 1), padding=(1, 0, 1)))),
        [x, w, b], tol=2e-4, eps=1e-5)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_cross_entropy(seed):
    logits = _r(seed, 4, 6)
    labels = np.random.default_rng(seed).integers(0, 6, size=4)
    check_grads(lambda x: tt.cross_entropy(x, labels), [logits])


# ---------------------------------------------------------------------------
# backward mechanics


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(tt.TensorError):
        tt.backward(tt.add(x, x))


def test_grad_accumulates_over_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
    y = tt.sum_(tt.add(tt.mul(x, x), x))  # d/dx (x^2 + x) = 2x + 1 = 5
    tt.backward(y)
    assert abs(x.grad[0] - 5.0) < 1e-12


def test_no_graph_without_leaves():
    x = Tensor(np.ones((2, 2)))
    y = tt.add(x, x)
    assert y._backward_fn is None and y._parents == ()


# ---------------------------------------------------------------------------
# optimizer


def test_adamw_lr_zero_is_noop(rng):
    p = tt.parameter(rng.standard_normal((3, 3)))
    before = p.data.copy()
    p.grad = rng.standard_normal((3, 3))
    state = tt.AdamWState([p])
    tt.adamw_step([p], state, lr=0.0, weight_decay=0.1)
    assert np.array_equal(p.data, before)
    assert state.t == 1 and np.any(state.m[0] != 0)


def test_adamw_first_step_matches_reference(rng):
    p = tt.parameter(np.array([1.0, -2.0]))
    g = np.array([0.5, 0.25], dtype=np.float32)
    p.grad = g.copy()
    state = tt.AdamWState([p])
    lr, b1, b2, eps, wd = 0.1, 0.9, 0.999, 1e-8, 0.01
    tt.adamw_step([p], state, lr=lr, betas=(b1, b2), weight_decay=wd)
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    mh, vh = m / (1 - b1), v / (1 - b2)
    ref = np.array([1.0, -2.0]) * (1 - lr * wd) - lr * mh / (np.sqrt(vh) + eps)
    assert rel_err(p.data, ref) < 1e-6


def test_adamw_minimizes_quadratic():
    p = tt.parameter(np.array([5.0]), dtype=np.float64)
    state = tt.AdamWState([p])
    for _ in range(400):
        p.zero_grad()
        loss = tt.sum_(tt.mul(p, p))
        tt.backward(loss)
        tt.adamw_step([p], state, lr=0.05)
    assert abs(p.data[0]) < 1e-2
