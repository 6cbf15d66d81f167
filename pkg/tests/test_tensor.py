import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from stau import tensor as T
from stau.tensor import GraphError, NumericError, Parameter, Tensor


def rand(rng, *shape):
    return rng.standard_normal(shape)


def fd_check(build, arrays, eps=1e-6, tol=1e-6):
    """Compare analytic grads of scalar build(*tensors) with central differences (float64)."""
    params = [Parameter(a.astype(np.float64)) for a in arrays]
    loss = build(*params)
    loss.backward()
    for p, a in zip(params, arrays):
        num = np.zeros_like(a, dtype=np.float64)
        for idx in np.ndindex(a.shape):
            hi, lo = a.astype(np.float64).copy(), a.astype(np.float64).copy()
            hi[idx] += eps
            lo[idx] -= eps
            args_hi = [Tensor(hi) if q is p else Tensor(q.data) for q in params]
            args_lo = [Tensor(lo) if q is p else Tensor(q.data) for q in params]
            num[idx] = (build(*args_hi).data.item() - build(*args_lo).data.item()) / (2 * eps)
        assert p.grad is not None
        err = np.abs(p.grad - num).max() / max(1.0, np.abs(num).max())
        assert err < tol, err


def project(t):
    w = np.random.default_rng(7).standard_normal(t.shape)
    return T.mse_loss(t, Tensor(w))


# ---------------------------------------------------------------------------
# forward behaviour


def test_rank_four_enforced():
    with pytest.raises(ValueError):
        Tensor(np.zeros((2, 3)))


def test_default_storage_is_float32():
    assert Tensor(np.zeros((1, 1, 2, 2), np.int64)).dtype == np.float32


def test_non_finite_forward_raises():
    x = Tensor(np.full((1, 1, 1, 1), 1e30, np.float32))
    with pytest.raises(NumericError):
        T.mul(x, x)


def test_backward_needs_scalar_and_runs_once():
    x = Parameter(np.ones((1, 1, 2, 2)))
    y = T.scale(x, 2.0)
    with pytest.raises(GraphError):
        y.backward()
    loss = T.mse_loss(x, Tensor(np.zeros((1, 1, 2, 2))))
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_no_grad_records_nothing():
    x = Parameter(np.ones((1, 1, 2, 2)))
    with T.no_grad():
        y = T.scale(x, 3.0)
    assert not y.requires_grad and y._parents == ()
    assert T.is_grad_enabled()


def test_conv_output_geometry():
    assert T.conv_output_size(64, 3, 2, 1) == 32
    assert T.deconv_output_size(32, 3, 2, 1, 1) == 64
    x = Tensor(np.zeros((2, 1, 16, 16)))
    w = Tensor(np.zeros((4, 1, 3, 3)))
    assert T.conv2d(x, w, stride=2, padding=1).shape == (2, 4, 8, 8)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 2, 5), (2, 1, 3), (2, 0, 2)])
def test_conv2d_matches_loops(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad)
    x, w, b = rand(rng, 2, 3, 7, 6), rand(rng, 4, 3, k, k), rand(rng, 4)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b.reshape(1, 4, 1, 1)), stride, pad).data
    np.testing.assert_allclose(got, oracles.conv2d(x, w, b, stride, pad), atol=1e-5)


@pytest.mark.parametrize("stride,pad,op", [(1, 1, 0), (2, 1, 1), (2, 0, 0), (3, 1, 2)])
def test_deconv2d_matches_scatter(stride, pad, op):
    rng = np.random.default_rng(stride * 10 + op)
    x, w, b = rand(rng, 2, 3, 4, 5), rand(rng, 3, 2, 3, 3), rand(rng, 2)
    got = T.deconv2d(Tensor(x), Tensor(w), Tensor(b.reshape(1, 2, 1, 1)), stride, pad, op).data
    np.testing.assert_allclose(got, oracles.deconv2d(x, w, b, stride, pad, op), atol=1e-5)


def test_deconv_is_adjoint_of_conv():
    # <conv(x), y> == <x, deconv(y)> for shared weights
    rng = np.random.default_rng(3)
    x, w = rand(rng, 2, 3, 8, 8), rand(rng, 5, 3, 3, 3)
    y = rand(rng, 2, 5, 4, 4)
    cx = T.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), stride=2, padding=1).data
    dy = T.deconv2d(Tensor(y, dtype=np.float64), Tensor(w, dtype=np.float64), stride=2, padding=1,
                    output_padding=1).data
    assert abs((cx * y).sum() - (x * dy).sum()) < 1e-9


def test_layer_norm_matches_oracle():
    rng = np.random.default_rng(4)
    x, g, b = rand(rng, 3, 4, 5, 5), rand(rng, 1, 4, 1, 1), rand(rng, 1, 4, 1, 1)
    got = T.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    np.testing.assert_allclose(got, oracles.layer_norm(x, g.ravel(), b.ravel()), atol=1e-5)


def test_sigmoid_stable_extremes():
    x = Tensor(np.array([-800.0, -30.0, 0.0, 30.0, 800.0]).reshape(1, 1, 1, 5), dtype=np.float64)
    y = T.sigmoid(x).data.ravel()
    assert y[2] == 0.5 and 0.0 <= y[0] < 1e-300 and y[4] == 1.0


def test_affine_combine_equal_inputs_exact():
    rng = np.random.default_rng(5)
    a = Tensor(rand(rng, 2, 3, 4, 4))
    gate = Tensor(rng.uniform(size=(2, 3, 4, 4)))
    assert np.array_equal(T.affine_combine(gate, a, a).data, a.data)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=6))
def test_score_softmax_sums_to_one(vals):
    scores = [Tensor(np.full((1, 1, 1, 1), v), dtype=np.float64) for v in vals]
    ys = [y.data.item() for y in T.score_softmax(scores)]
    assert abs(sum(ys) - 1.0) < 1e-12
    np.testing.assert_allclose(ys, oracles.softmax(vals), rtol=1e-12, atol=1e-300)


# ---------------------------------------------------------------------------
# gradients against central differences


def test_grad_conv2d():
    rng = np.random.default_rng(10)
    fd_check(lambda x, w, b: project(T.conv2d(x, w, b, stride=2, padding=1)),
             [rand(rng, 2, 2, 5, 5), rand(rng, 3, 2, 3, 3), rand(rng, 1, 3, 1, 1)])


def test_grad_deconv2d():
    rng = np.random.default_rng(11)
    fd_check(lambda x, w, b: project(T.deconv2d(x, w, b, stride=2, padding=1, output_padding=1)),
             [rand(rng, 2, 2, 3, 3), rand(rng, 2, 3, 3, 3), rand(rng, 1, 3, 1, 1)])


def test_grad_layer_norm():
    rng = np.random.default_rng(12)
    fd_check(lambda x, g, b: project(T.layer_norm(x, g, b)),
             [rand(rng, 2, 3, 3, 3), rand(rng, 1, 3, 1, 1), rand(rng, 1, 3, 1, 1)])


def test_grad_elementwise_chain():
    rng = np.random.default_rng(13)

    def f(a, b, c):
        g = T.sigmoid(a)
        mixed = T.affine_combine(g, T.leaky_relu(b, 0.2), T.mul(c, b))
        return project(T.sub(T.add(mixed, T.scale(c, 0.5)), a))

    fd_check(f, [rand(rng, 2, 2, 3, 3) for _ in range(3)])


@pytest.mark.parametrize("per_location", [False, True])
def test_grad_attention_chain(per_location):
    rng = np.random.default_rng(14)

    def f(q, k1, k2, v1, v2):
        ws = T.score_softmax([T.dot_score(k1, q, per_location), T.dot_score(k2, q, per_location)])
        return project(T.weighted_sum(ws, [v1, v2]))

    fd_check(f, [0.3 * rand(rng, 2, 2, 3, 3) for _ in range(5)])


def test_grad_concat_split():
    rng = np.random.default_rng(15)

    def f(a, b):
        x = T.concat([a, b], axis=1)
        p, q = T.split_channels(x, [1, 3])
        return T.sum_scalars([project(T.mul(p, p)), project(q)])

    fd_check(f, [rand(rng, 2, 2, 3, 3), rand(rng, 2, 2, 3, 3)])


def test_grad_accumulates_over_reuse():
    x = Parameter(np.full((1, 1, 1, 1), 3.0))
    loss = T.sum_scalars([T.mul(x, x), T.scale(x, 2.0)])
    loss.backward()
    assert x.grad.item() == pytest.approx(8.0)


# ---------------------------------------------------------------------------
# optimizer


def test_adam_matches_scalar_oracle():
    p = Parameter(np.full((1, 1, 1, 1), 0.5), dtype=np.float64)
    opt = T.Adam([p], lr=0.01)
    grads = [0.3, -1.2, 0.05, 2.0, -0.7]
    got = []
    for g in grads:
        p.grad = np.full((1, 1, 1, 1), g)
        opt.step()
        got.append(p.data.item())
    np.testing.assert_allclose(got, oracles.adam(0.5, grads, lr=0.01), rtol=1e-12)
    assert p.step == len(grads)


def test_adam_skips_params_without_grad():
    p = Parameter(np.ones((1, 1, 1, 1)))
    T.Adam([p]).step()
    assert p.step == 0 and p.data.item() == 1.0
