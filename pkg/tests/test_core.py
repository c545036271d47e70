import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lazytrigger.core import (
    ContractError,
    ConvSpec,
    TriggerParams,
    conv2d,
    dilate,
    maxpool2,
    maxpool2_argmax,
    relu,
    trigger_eval,
    unpool2,
    upsample2,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def conv_oracle(x, kernels, biases):
    """Quadruple loop over zero-padded input."""
    l, m, k, _ = kernels.shape
    _, h, w = x.shape
    r = k // 2
    out = np.zeros((l, h, w))
    for f in range(l):
        for y in range(h):
            for xx in range(w):
                s = biases[f]
                for c in range(m):
                    for dy in range(k):
                        for dx in range(k):
                            yy, xi = y + dy - r, xx + dx - r
                            if 0 <= yy < h and 0 <= xi < w:
                                s += kernels[f, c, dy, dx] * x[c, yy, xi]
                out[f, y, xx] = s
    return out


# -- conv2d ------------------------------------------------------------------------


def test_conv_identity_kernel(rng):
    x = rng.random((1, 6, 6))
    out = conv2d(x, ConvSpec(np.ones((1, 1, 1, 1)), np.zeros(1)))
    np.testing.assert_array_equal(out, x)


def test_conv_constant_image_interior_and_corners():
    c = 0.37
    out = conv2d(np.full((1, 5, 5), c), ConvSpec(np.ones((1, 1, 3, 3)), np.zeros(1)))[0]
    np.testing.assert_allclose(out[1:-1, 1:-1], 9 * c, rtol=1e-15)
    for y, x in [(0, 0), (0, 4), (4, 0), (4, 4)]:
        assert out[y, x] == pytest.approx(4 * c, rel=1e-15)
    assert out[0, 2] == pytest.approx(6 * c, rel=1e-15)


@pytest.mark.parametrize("m,l,k", [(1, 1, 3), (2, 3, 3), (3, 2, 5), (1, 4, 1)])
def test_conv_matches_loop_oracle(rng, m, l, k):  # noqa: E741
    x = rng.normal(size=(m, 5, 5))
    spec = ConvSpec(rng.normal(size=(l, m, k, k)), rng.normal(size=l))
    want = conv_oracle(x, spec.kernels, spec.biases)
    np.testing.assert_allclose(conv2d(x, spec), want, rtol=1e-12, atol=1e-14)


def test_conv_channel_mismatch():
    with pytest.raises(ContractError):
        conv2d(np.zeros((2, 4, 4)), ConvSpec(np.zeros((1, 1, 3, 3)), np.zeros(1)))


def test_convspec_rejects_even_kernel_and_bad_bias():
    with pytest.raises(ContractError):
        ConvSpec(np.zeros((1, 1, 2, 2)), np.zeros(1))
    with pytest.raises(ContractError):
        ConvSpec(np.zeros((2, 1, 3, 3)), np.zeros(1))


@given(
    seed=st.integers(0, 2**32 - 1),
    a=st.floats(-5, 5),
    b=st.floats(-5, 5),
    m=st.integers(1, 3),
    l=st.integers(1, 3),
    k=st.sampled_from([1, 3, 5]),
)
def test_conv_is_linear(seed, a, b, m, l, k):  # noqa: E741
    r = np.random.default_rng(seed)
    spec = ConvSpec(r.normal(size=(l, m, k, k)), np.zeros(l))
    X = r.normal(size=(m, 6, 6))
    Y = r.normal(size=(m, 6, 6))
    lhs = conv2d(a * X + b * Y, spec)
    rhs = a * conv2d(X, spec) + b * conv2d(Y, spec)
    scale = max(1.0, np.abs(lhs).max(), np.abs(rhs).max())
    assert np.abs(lhs - rhs).max() <= 1e-10 * scale


# -- relu --------------------------------------------------------------------------


def test_relu_examples(rng):
    neg = -rng.random((2, 3, 3)) - 0.1
    assert not relu(neg).any()
    pos = rng.random((2, 3, 3))
    np.testing.assert_array_equal(relu(pos), pos)
    mixed = rng.normal(size=(2, 4, 4))
    want = np.array([v if v > 0 else 0.0 for v in mixed.ravel()]).reshape(mixed.shape)
    np.testing.assert_array_equal(relu(mixed), want)


# -- maxpool2 ----------------------------------------------------------------------


def test_maxpool_constant():
    np.testing.assert_array_equal(maxpool2(np.full((2, 6, 8), 3.5)), np.full((2, 3, 4), 3.5))


def test_maxpool_distinct_values():
    x = np.arange(16.0).reshape(1, 4, 4)
    np.testing.assert_array_equal(maxpool2(x)[0], [[5, 7], [13, 15]])


def test_maxpool_block_scan_oracle(rng):
    x = rng.normal(size=(3, 8, 8))
    want = np.empty((3, 4, 4))
    for c in range(3):
        for y in range(4):
            for xx in range(4):
                want[c, y, xx] = max(x[c, 2 * y + i, 2 * xx + j] for i in range(2) for j in range(2))
    np.testing.assert_array_equal(maxpool2(x), want)


def test_maxpool_odd_dims():
    with pytest.raises(ContractError):
        maxpool2(np.zeros((1, 3, 4)))
    with pytest.raises(ContractError):
        maxpool2(np.zeros((4, 5)))


@given(arrays(np.float64, (2, 4, 6), elements=finite), arrays(np.float64, (2, 4, 6), elements=st.floats(0, 5)))
def test_maxpool_monotone(x, d):
    assert np.all(maxpool2(x) <= maxpool2(x + d))


@given(st.floats(-1e6, 1e6), st.integers(1, 3))
def test_maxpool_idempotent_on_constants(c, levels):
    x = np.full((1, 16, 16), c)
    for _ in range(levels):
        x = maxpool2(x)
        assert np.all(x == c)


def test_argmax_ties_go_to_lowest_index():
    x = np.array([[1.0, 1.0], [1.0, 1.0]])
    v, idx = maxpool2_argmax(x)
    assert v[0, 0] == 1.0 and idx[0, 0] == 0
    x = np.array([[0.0, 2.0], [2.0, 1.0]])
    assert maxpool2_argmax(x)[1][0, 0] == 1


def test_unpool_routes_to_argmax(rng):
    x = rng.normal(size=(2, 4, 6))
    v, idx = maxpool2_argmax(x)
    g = rng.normal(size=v.shape)
    back = unpool2(g, idx)
    assert back.shape == x.shape
    # every block holds exactly one nonzero at its max
    np.testing.assert_allclose(maxpool2(np.abs(back)), np.abs(g))
    np.testing.assert_array_equal((back != 0), (x == np.repeat(np.repeat(v, 2, -2), 2, -1)))


# -- trigger -----------------------------------------------------------------------


def test_trigger_zero_params(rng):
    out = trigger_eval(rng.normal(size=(3, 4, 4)), TriggerParams(np.zeros(3), 0.0))
    np.testing.assert_array_equal(out, 0.5)


def test_trigger_saturates(rng):
    out = trigger_eval(rng.uniform(-1, 1, size=(2, 4, 4)), TriggerParams(rng.uniform(-1, 1, 2), -1000.0))
    assert np.all(out < 1e-300)


def test_trigger_per_pixel_oracle(rng):
    f = rng.normal(size=(3, 5, 4))
    p = TriggerParams(rng.normal(size=3), 0.3)
    out = trigger_eval(f, p)
    for y in range(5):
        for x in range(4):
            z = sum(p.weights[c] * f[c, y, x] for c in range(3)) + p.bias
            assert out[y, x] == pytest.approx(1.0 / (1.0 + math.exp(-z)), rel=1e-12)


def test_trigger_weight_mismatch():
    with pytest.raises(ContractError):
        trigger_eval(np.zeros((2, 2, 2)), TriggerParams(np.zeros(3), 0.0))


def test_trigger_params_must_be_finite():
    with pytest.raises(ContractError):
        TriggerParams(np.array([np.nan]), 0.0)


@given(arrays(np.float64, (2, 3, 3), elements=finite), st.lists(st.floats(-1, 1), min_size=2, max_size=2), st.floats(-5, 5))
def test_trigger_strictly_inside_unit_interval(f, w, b):
    # |z| stays below ~35 here; beyond that float64 rounds the logistic to 0 or 1
    out = trigger_eval(f, TriggerParams(np.array(w), b))
    assert np.all(out > 0) and np.all(out < 1)


def test_core_ops_are_deterministic(rng):
    x = rng.normal(size=(2, 8, 8))
    spec = ConvSpec(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
    p = TriggerParams(rng.normal(size=3), 0.1)
    a = trigger_eval(maxpool2(relu(conv2d(x, spec))), p)
    b = trigger_eval(maxpool2(relu(conv2d(x.copy(), spec))), p)
    assert a.tobytes() == b.tobytes()


@given(arrays(np.float64, (3, 4, 4), elements=finite))
def test_core_outputs_finite(x):
    spec = ConvSpec(np.ones((2, 3, 3, 3)), np.zeros(2))
    y = maxpool2(relu(conv2d(x, spec)))
    assert np.all(np.isfinite(y))
    assert np.all(np.isfinite(trigger_eval(y, TriggerParams(np.ones(2), 0.0))))


def test_dilate_and_upsample():
    m = np.zeros((5, 5), dtype=bool)
    m[2, 2] = True
    assert dilate(m, 1).sum() == 9
    assert dilate(m, 0).sum() == 1
    up = upsample2(np.array([[1, 0], [0, 1]], dtype=bool))
    np.testing.assert_array_equal(up, [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]])
