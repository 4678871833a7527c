import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advkit import diffcore as dc


def graph(input_shape, layers, seed=0, dtype=np.float64):
    return dc.Graph(input_shape, layers, seed=seed, dtype=dtype)


# ---- forward ---------------------------------------------------------------


def test_identity_pointwise_conv_returns_input(rng):
    g = graph((3, 4, 16), [dc.Conv2D(3, 1, bias=False)])
    g.set_param("0.W", np.eye(3).reshape(3, 3, 1, 1))
    x = rng.standard_normal((2, 3, 4, 16))
    np.testing.assert_array_equal(dc.forward(g, x), x)


def test_avg_pool_of_constant_is_constant():
    g = graph((2, 4, 12), [dc.Pool("Avg", (2, 3))])
    out = dc.forward(g, np.full((3, 2, 4, 12), 1.75))
    np.testing.assert_allclose(out, 1.75, rtol=0, atol=1e-12)
    assert out.shape == (3, 2, 2, 4)


def test_softmax_rows_sum_to_one(rng):
    g = graph((4, 16), [dc.Flatten(), dc.Dense(5), dc.Activation("Softmax")], dtype=np.float32)
    out = dc.forward(g, rng.standard_normal((7, 4, 16)) * 3)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_forward_rejects_wrong_shape_and_nonfinite():
    g = graph((4, 16), [dc.Flatten(), dc.Dense(2)])
    with pytest.raises(dc.ShapeError):
        g.forward(np.zeros((2, 4, 15)))
    bad = np.zeros((1, 4, 16))
    bad[0, 0, 0] = np.nan
    with pytest.raises(dc.NonFiniteError):
        g.forward(bad)


# ---- backward ---------------------------------------------------------------


def test_dense_sum_gradient_is_weight_row_sums(rng):
    g = graph((6,), [dc.Dense(3)])
    x = rng.standard_normal((4, 6))
    out = dc.forward(g, x)
    grads = dc.backward(g, np.ones_like(out))
    W = g.get_param("0.W")  # stored as (in, out)
    np.testing.assert_allclose(grads.input, np.tile(W.sum(axis=1), (4, 1)), rtol=1e-12)


def test_square_activation_gradient_is_2x(rng):
    g = graph((3, 5), [dc.Activation("Square")])
    x = rng.standard_normal((2, 3, 5))
    dc.forward(g, x)
    np.testing.assert_allclose(dc.backward(g, np.ones((2, 3, 5))).input, 2 * x, rtol=1e-12)


def test_backward_before_forward_raises():
    g = graph((4,), [dc.Dense(2)])
    with pytest.raises(dc.GraphStateError):
        g.backward(np.ones((1, 2)))


def test_random_three_layer_graph_matches_central_differences(rng):
    g = graph((4, 32), [dc.Reshape((1, 4, 32)), dc.Conv2D(3, (1, 5)), dc.Activation("ELU"),
                        dc.Flatten(), dc.Dense(3)], seed=5)
    x = rng.standard_normal((2, 4, 32))
    out, tape = g.forward(x)
    d = rng.standard_normal(out.shape)
    analytic = g.backward(d, tape).input

    # independent oracle: plain central differences on J(x) = sum(d * f(x))
    h = 1e-4
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num[idx] = (np.sum(d * g.forward(xp, record=False)[0])
                    - np.sum(d * g.forward(xm, record=False)[0])) / (2 * h)
    err = np.abs(analytic - num) / np.maximum(np.maximum(np.abs(analytic), np.abs(num)), 1e-8)
    assert err.max() <= 1e-5


LAYER_CASES = {
    "conv_grouped_strided": ((4, 6, 10), [dc.Conv2D(8, (3, 3), stride=(1, 2), padding=1, groups=2)]),
    "dense": ((12,), [dc.Dense(5)]),
    "elu": ((3, 7), [dc.Activation("ELU")]),
    "relu": ((3, 7), [dc.Activation("ReLU")]),
    "square_log": ((3, 7), [dc.Activation("Square"), dc.Activation("Log")]),
    "softmax": ((6,), [dc.Activation("Softmax")]),
    "max_pool": ((2, 4, 9), [dc.Pool("Max", (2, 3))]),
    "avg_pool_stride": ((2, 4, 9), [dc.Pool("Avg", (1, 3), stride=(1, 2))]),
    "batchnorm": ((3, 2, 5), [dc.BatchNorm()]),
    "dropout": ((3, 5), [dc.Dropout(0.5)]),
    "flatten_reshape": ((3, 4), [dc.Flatten(), dc.Reshape((2, 6))]),
    "channel_mix": ((4, 9), [dc.ChannelMix(np.arange(12.0).reshape(3, 4) / 7)]),
    "stft": ((2, 32), [dc.STFTMagnitude(16, 4)]),
}


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_every_layer_type_passes_gradient_check(name, rng):
    shape, layers = LAYER_CASES[name]
    g = graph(shape, layers, seed=2)
    x = rng.standard_normal((3,) + shape)
    if name == "square_log":
        # log(x^2) has third derivative 4/x^3; keep |x| >= 0.5 so the h^2 truncation term stays tiny
        x = np.sign(x) * (0.5 + np.abs(x))
    rep = dc.finite_diff_check(g, x, h=1e-4, tol=1e-5, param_fraction=1.0)
    assert rep.passed, (name, rep)
    assert rep.n_checked > 0


class DoubledDense(dc.Dense):
    kind = "DoubledDense"

    def backward(self, dy, x, need_param_grads=True):
        dx, grads = super().backward(dy, x, need_param_grads)
        return dx, {k: 2 * v for k, v in grads.items()}


def test_injected_gradient_fault_is_reported_at_that_layer(rng, monkeypatch):
    monkeypatch.setitem(dc.LAYER_TYPES, "DoubledDense", DoubledDense)
    g = graph((3, 8), [dc.Flatten(), dc.Dense(6), dc.Activation("ELU"), DoubledDense(2)])
    rep = dc.finite_diff_check(g, rng.standard_normal((2, 3, 8)), param_fraction=1.0)
    assert not rep.passed
    assert rep.worst_coordinate[0].startswith("3.")
    assert rep.max_rel_err == pytest.approx(1 / 2, rel=1e-3)  # |2a - a| / 2a


def test_empty_batch_is_an_error():
    g = graph((4,), [dc.Dense(2)])
    with pytest.raises(ValueError):
        dc.finite_diff_check(g, np.zeros((0, 4)))


# ---- properties ----------------------------------------------------------


def _net(seed):
    return dc.Graph((4, 16), [dc.Reshape((1, 4, 16)), dc.Conv2D(4, (1, 3), padding=(0, 1)),
                              dc.BatchNorm(), dc.Activation("ELU"), dc.Dropout(0.3),
                              dc.Flatten(), dc.Dense(3)], seed=seed)


def test_eval_forward_is_deterministic(rng):
    g = _net(0)
    x = rng.standard_normal((5, 4, 16))
    np.testing.assert_array_equal(dc.forward(g, x), dc.forward(g, x))


def test_train_forward_is_deterministic_given_seed(rng):
    x = rng.standard_normal((5, 4, 16))
    a, b = _net(3).train(), _net(3).train()
    np.testing.assert_array_equal(dc.forward(a, x), dc.forward(b, x))


@settings(max_examples=20, deadline=None)
@given(scale=st.floats(0.01, 100.0), seed=st.integers(0, 2**16))
def test_backward_is_linear_in_the_output_gradient(scale, seed):
    g = _net(seed % 7)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4, 16)).astype(np.float32)
    out, tape = g.forward(x)
    d = rng.standard_normal(out.shape).astype(np.float32)
    g1 = g.backward(d, tape).input
    g2 = g.backward(np.float32(scale) * d, tape).input
    np.testing.assert_allclose(g2, scale * g1, rtol=1e-6, atol=1e-6 * scale * np.abs(g1).max())


@settings(max_examples=25, deadline=None)
@given(n_conv=st.integers(1, 3), kernel=st.integers(1, 6), pool=st.integers(1, 4),
       t=st.integers(8, 40), n=st.integers(1, 3))
def test_graphs_accepted_at_build_time_run_without_shape_errors(n_conv, kernel, pool, t, n):
    layers = [dc.Reshape((1, 2, t))]
    for _ in range(n_conv):
        layers += [dc.Conv2D(2, (1, kernel), padding=(0, kernel // 2)), dc.Activation("ReLU")]
    layers += [dc.Pool("Max", (1, pool)), dc.Flatten(), dc.Dense(2)]
    try:
        g = dc.Graph((2, t), layers)
    except dc.ShapeError:
        return
    out, tape = g.forward(np.ones((n, 2, t)))
    assert g.backward(np.ones_like(out), tape).input.shape == (n, 2, t)


def test_sign_of_zero_is_zero():
    np.testing.assert_array_equal(dc.sign(np.array([-2.0, 0.0, 3.0, -0.0])), [-1, 0, 1, 0])


def test_batchnorm_running_statistics_use_momentum(rng):
    g = graph((2, 5), [dc.BatchNorm()]).train()
    x = rng.standard_normal((8, 2, 5)) * 3 + 1
    dc.forward(g, x)
    bn = g.layers[0]
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.1 * x.mean(axis=(0, 2)), rtol=1e-12)
    np.testing.assert_allclose(bn.buffers["running_var"], 0.9 + 0.1 * x.var(axis=(0, 2)), rtol=1e-12)


def test_log_must_follow_a_positive_layer():
    with pytest.raises(dc.ShapeError):
        dc.Graph((3,), [dc.Dense(3), dc.Activation("Log")])
    dc.Graph((1, 2, 8), [dc.Activation("Square"), dc.Pool("Avg", (1, 2)), dc.Activation("Log")])


def test_log_guard_keeps_zero_input_finite():
    g = graph((4,), [dc.Activation("Square"), dc.Activation("Log")])
    out = dc.forward(g, np.zeros((1, 4)))
    np.testing.assert_allclose(out, np.log(1e-7))


def test_cross_entropy_gradient_survives_saturated_softmax():
    logits = np.array([[40.0, 0.0], [0.0, 0.0]], dtype=np.float32)
    loss, d = dc.cross_entropy(logits, np.array([0, 1]), reduction="sum")
    assert d[0, 0] < 0 and d[0, 0] == -d[0, 1]
    assert loss == pytest.approx(np.log1p(np.exp(-40.0)) + np.log(2), rel=1e-5)


def test_cross_entropy_matches_finite_differences(rng):
    z = rng.standard_normal((4, 3))
    y = np.array([0, 2, 1, 2])
    w = np.array([1.0, 2.0, 0.5])
    _, d = dc.cross_entropy(z, y, w)
    h = 1e-6
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        num = (dc.cross_entropy(zp, y, w)[0] - dc.cross_entropy(zm, y, w)[0]) / (2 * h)
        assert d[idx] == pytest.approx(num, abs=1e-8)


def test_weights_round_trip_through_container(rng):
    g = dc.Graph((3, 8), [dc.ChannelMix(rng.standard_normal((2, 3))), dc.Reshape((1, 2, 8)),
                          dc.Conv2D(2, (1, 3)), dc.BatchNorm(), dc.Flatten(), dc.Dense(2)], seed=4)
    buf = io.BytesIO()
    dc.save_weights(g, buf, extra={"note": "x"})
    buf.seek(0)
    g2, manifest = dc.load_weights(buf)
    assert manifest["extra"] == {"note": "x"}
    x = rng.standard_normal((2, 3, 8)).astype(np.float32)
    np.testing.assert_array_equal(dc.forward(g, x), dc.forward(g2, x))


def test_weights_container_rejects_bad_magic():
    with pytest.raises(dc.ContainerError):
        dc.load_weights(io.BytesIO(b"XXXX" + b"\0" * 20))
