import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partgan.architectures import dcgan_discriminator, dcgan_generator
from partgan.nn import (
    BatchNorm,
    Conv2d,
    Dense,
    Dropout,
    LeakyReLU,
    Network,
    ReLU,
    Reshape,
    ShapeError,
    Sigmoid,
    Tanh,
    TraceError,
    Upsample,
    backward,
    build_network,
    check_gradients,
    conv_output_size,
    forward,
    grad_check,
)


def linear_loss(seed=0):
    """Loss sum(R * out) with a fixed random R, so every output coordinate matters."""
    cache = {}

    def loss(out):
        if out.shape not in cache:
            cache[out.shape] = np.random.default_rng(seed).standard_normal(out.shape)
        r = cache[out.shape]
        return float(np.sum(r * out)), r

    return loss


def quadratic_loss(out):
    return 0.5 * float(np.sum(out**2)), out.copy()


# --- construction -----------------------------------------------------------


def test_full_generator_builds_100_to_3x32x32():
    net = build_network(dcgan_generator(100, 0, 3, 32, 128), 0)
    assert net.input_shape == (100,)
    assert net.shapes[1] == (8192,)
    assert net.output_shape == (3, 32, 32)


def test_full_discriminator_shapes():
    net = build_network(dcgan_discriminator(3, 32), 0, input_shape=(3, 32, 32))
    convs = [s for layer, s in zip(net.layers, net.shapes[1:]) if isinstance(layer, Conv2d)]
    assert convs == [(16, 16, 16), (32, 8, 8), (64, 4, 4), (128, 2, 2)]
    assert net.output_shape == (1,)


def test_legacy_batchnorm_epsilons():
    gen = [l.epsilon for l in dcgan_generator(bn_eps="legacy") if isinstance(l, BatchNorm)]
    disc = [l.epsilon for l in dcgan_discriminator(bn_eps="legacy") if isinstance(l, BatchNorm)]
    assert gen == [1e-5, 0.8, 0.8] and disc == [0.8, 0.8, 0.8]
    assert all(l.epsilon == 1e-5 for l in dcgan_generator() if isinstance(l, BatchNorm))


def test_empty_layer_list_rejected():
    with pytest.raises(ShapeError):
        build_network([], 0)


def test_same_seed_same_params():
    a = build_network(dcgan_generator(16, 4, 1, 16, 8), 7)
    b = build_network(dcgan_generator(16, 4, 1, 16, 8), 7)
    assert a.params.tobytes() == b.params.tobytes()
    c = build_network(dcgan_generator(16, 4, 1, 16, 8), 8)
    assert not np.array_equal(a.params, c.params)


def test_shape_mismatch_names_layers():
    with pytest.raises(ShapeError, match="layer 1"):
        Network([Dense(4, 3), Dense(5, 2)], (4,))


def test_bad_batch_shape():
    net = build_network([Dense(3, 2)], 0)
    with pytest.raises(ShapeError):
        forward(net, np.zeros((2, 4)))


# --- forward ----------------------------------------------------------------


def test_dense_identity():
    net = build_network([Dense(4, 4)], 0)
    w, b = net.layer_params(0)
    w[...] = np.eye(4)
    b[...] = 0
    x = np.random.default_rng(0).standard_normal((3, 4))
    y, _ = forward(net, x)
    np.testing.assert_array_equal(y, x)


def test_sigmoid_tanh_at_zero():
    assert forward(build_network([Sigmoid()], 0, (1,)), np.zeros((1, 1)))[0][0, 0] == 0.5
    assert forward(build_network([Tanh()], 0, (1,)), np.zeros((1, 1)))[0][0, 0] == 0.0


def test_conv_stride2_halves_32():
    net = build_network([Conv2d(3, 4, 3, 2, 1)], 0, (3, 32, 32))
    assert net.output_shape == (4, 16, 16)
    y, _ = forward(net, np.zeros((2, 3, 32, 32)))
    assert y.shape == (2, 4, 16, 16)


@given(
    size=st.integers(3, 12),
    kernel=st.integers(1, 3),
    stride=st.integers(1, 3),
    padding=st.integers(0, 2),
)
def test_conv_shape_formula(size, kernel, stride, padding):
    expected = (size + 2 * padding - kernel) // stride + 1
    assert conv_output_size(size, kernel, stride, padding) == expected
    net = build_network([Conv2d(1, 2, kernel, stride, padding)], 0, (1, size, size))
    y, _ = forward(net, np.zeros((1, 1, size, size)))
    assert y.shape == (1, 2, expected, expected)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    net = build_network([Conv2d(2, 3, 3, 2, 1)], 1, (2, 5, 5), init_std=1.0)
    w, b = net.layer_params(0)
    b[...] = rng.standard_normal(3)
    x = rng.standard_normal((2, 2, 5, 5))
    y, _ = forward(net, x)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 3, 3, 3))
    for n in range(2):
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(y, ref, rtol=0, atol=1e-12)


def test_upsample_nearest():
    net = build_network([Upsample(2)], 0, (1, 2, 2))
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    y, _ = forward(net, x)
    np.testing.assert_array_equal(y[0, 0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])


def test_dropout_eval_is_identity_and_train_needs_rng():
    net = build_network([Dropout(0.5)], 0, (10,))
    x = np.ones((4, 10))
    np.testing.assert_array_equal(forward(net, x, "eval")[0], x)
    with pytest.raises(ValueError):
        forward(net, x, "train")
    y, _ = forward(net, x, "train", np.random.default_rng(0))
    assert set(np.unique(y)) <= {0.0, 2.0}


@given(n=st.integers(2, 8), c=st.integers(1, 4), seed=st.integers(0, 1000))
def test_batchnorm_train_moments(n, c, seed):
    rng = np.random.default_rng(seed)
    net = build_network([BatchNorm(c)], 0, (c, 3, 3))
    gamma, beta = net.layer_params(0)
    gamma[...] = rng.uniform(0.5, 2, c)
    beta[...] = rng.standard_normal(c)
    x = rng.standard_normal((n, c, 3, 3)) * 3 + 1
    y, _ = forward(net, x, "train")
    batch_var = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), beta, rtol=0, atol=1e-10)
    # normalization divides by sqrt(var + eps), so the output variance is scale^2 * var / (var + eps)
    expected = gamma**2 * batch_var / (batch_var + 1e-5)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), expected, rtol=0, atol=1e-10)


def test_batchnorm_running_stats():
    net = build_network([BatchNorm(2)], 0, (2,))
    x = np.array([[0.0, 1.0], [2.0, 5.0]])
    forward(net, x, "train")
    np.testing.assert_allclose(net.buffers[0]["running_mean"], 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(net.buffers[0]["running_var"], 0.9 + 0.1 * x.var(axis=0, ddof=1))
    before = {k: v.copy() for k, v in net.buffers[0].items()}
    forward(net, x, "train", update_stats=False)
    forward(net, x, "eval")
    for k in before:
        np.testing.assert_array_equal(net.buffers[0][k], before[k])


def test_eval_forward_deterministic():
    layers = dcgan_discriminator(1, 16, 2, (4, 8), 0.25)
    a = build_network(layers, 5, (3, 16, 16))
    b = build_network(layers, 5, (3, 16, 16))
    x = np.random.default_rng(0).standard_normal((3, 3, 16, 16))
    assert forward(a, x, "eval")[0].tobytes() == forward(b, x, "eval")[0].tobytes()


# --- backward ---------------------------------------------------------------


def test_dense_scalar_param_grad_is_input():
    net = build_network([Dense(3, 1)], 0)
    x = np.array([[1.5, -2.0, 0.25]])
    _, trace = forward(net, x)
    grad, _ = backward(net, trace, np.ones((1, 1)))
    w_grad, b_grad = net.layer_params(0, grad)
    np.testing.assert_array_equal(w_grad[0], x[0])
    assert b_grad[0] == 1.0


def test_leaky_relu_negative_slope():
    net = build_network([LeakyReLU(0.2)], 0, (2,))
    _, trace = forward(net, np.array([[-1.0, 3.0]]))
    _, gx = backward(net, trace, np.array([[5.0, 5.0]]))
    np.testing.assert_allclose(gx, [[1.0, 5.0]])


def test_trace_consumed_once():
    net = build_network([Dense(2, 2)], 0)
    _, trace = forward(net, np.ones((1, 2)))
    backward(net, trace, np.ones((1, 2)))
    with pytest.raises(TraceError):
        backward(net, trace, np.ones((1, 2)))


def test_trace_from_other_network_rejected():
    a = build_network([Dense(2, 2)], 0)
    b = build_network([Dense(2, 2)], 0)
    _, trace = forward(a, np.ones((1, 2)))
    with pytest.raises(TraceError):
        backward(b, trace, np.ones((1, 2)))


# --- gradient checks ---------------------------------------------------------


def test_grad_check_quadratic_dense():
    net = build_network([Dense(5, 4), Dense(4, 3)], 0, init_std=0.5)
    x = np.random.default_rng(1).standard_normal((6, 5))
    assert grad_check(net, x, quadratic_loss) < 1e-6


def test_grad_check_zero_params():
    net = build_network([Tanh()], 0, (3,))
    result = check_gradients(net, np.ones((2, 3)), quadratic_loss)
    assert result.max_rel_error == 0 and result.coords.size == 0


def test_grad_check_rejects_unfrozen_dropout():
    net = build_network([Dense(4, 4), Dropout(0.5)], 0)
    with pytest.raises(ValueError, match="dropout_seed"):
        grad_check(net, np.ones((2, 4)), quadratic_loss)
    assert grad_check(net, np.ones((2, 4)), quadratic_loss, dropout_seed=3) < 1e-6
    assert grad_check(net, np.ones((2, 4)), quadratic_loss, mode="eval") < 1e-6


def test_grad_check_restores_params():
    net = build_network([Dense(3, 3), ReLU(), Dense(3, 1)], 0, init_std=0.5)
    before = net.params.copy()
    grad_check(net, np.random.default_rng(0).standard_normal((4, 3)), quadratic_loss)
    assert net.params.tobytes() == before.tobytes()


def _check_layer(layers, in_shape, batch, seed, wrt, mode="train", init_std=0.5, **kw):
    net = build_network(layers, seed, input_shape=in_shape, init_std=init_std)
    rng = np.random.default_rng(seed)
    for i, layer in enumerate(net.layers):
        if isinstance(layer, BatchNorm):
            gamma, beta = net.layer_params(i)
            gamma[...] = rng.uniform(0.5, 1.5, gamma.shape)
            beta[...] = rng.standard_normal(beta.shape)
    x = rng.standard_normal((batch,) + tuple(in_shape))
    result = check_gradients(net, x, linear_loss(seed), n_coords=20, seed=seed, wrt=wrt, mode=mode, **kw)
    return result


SEEDS = st.integers(0, 10_000)
GRAD_SETTINGS = settings(max_examples=15, deadline=None)


@GRAD_SETTINGS
@given(seed=SEEDS, i=st.integers(1, 5), o=st.integers(1, 5), n=st.integers(1, 4), wrt=st.sampled_from(["params", "input"]))
def test_grad_dense(seed, i, o, n, wrt):
    assert _check_layer([Dense(i, o)], (i,), n, seed, wrt).max_rel_error < 1e-4


@GRAD_SETTINGS
@given(
    seed=SEEDS,
    c=st.integers(1, 3),
    o=st.integers(1, 3),
    size=st.integers(3, 6),
    kernel=st.sampled_from([1, 3]),
    stride=st.integers(1, 2),
    padding=st.integers(0, 1),
    wrt=st.sampled_from(["params", "input"]),
)
def test_grad_conv(seed, c, o, size, kernel, stride, padding, wrt):
    result = _check_layer([Conv2d(c, o, kernel, stride, padding)], (c, size, size), 2, seed, wrt)
    assert result.max_rel_error < 1e-4


@GRAD_SETTINGS
@given(
    seed=SEEDS,
    c=st.integers(1, 3),
    n=st.integers(2, 5),
    spatial=st.booleans(),
    mode=st.sampled_from(["train", "eval"]),
    wrt=st.sampled_from(["params", "input"]),
)
def test_grad_batchnorm(seed, c, n, spatial, mode, wrt):
    shape = (c, 2, 3) if spatial else (c,)
    assert _check_layer([BatchNorm(c)], shape, n, seed, wrt, mode).max_rel_error < 1e-4


@GRAD_SETTINGS
@given(seed=SEEDS, c=st.integers(1, 3), size=st.integers(1, 4), scale=st.integers(1, 3))
def test_grad_upsample(seed, c, size, scale):
    assert _check_layer([Upsample(scale)], (c, size, size), 2, seed, "input").max_rel_error < 1e-4


@GRAD_SETTINGS
@given(seed=SEEDS, rate=st.floats(0.0, 0.8), d=st.integers(1, 8))
def test_grad_dropout_frozen_mask(seed, rate, d):
    result = _check_layer([Dropout(rate)], (d,), 3, seed, "input", dropout_seed=seed)
    assert result.max_rel_error < 1e-4


@GRAD_SETTINGS
@given(
    seed=SEEDS,
    layer=st.sampled_from([ReLU(), LeakyReLU(0.2), LeakyReLU(0.01), Tanh(), Sigmoid()]),
    d=st.integers(1, 8),
)
def test_grad_activations(seed, layer, d):
    assert _check_layer([layer], (d,), 3, seed, "input").max_rel_error < 1e-4


@GRAD_SETTINGS
@given(seed=SEEDS, c=st.integers(1, 3), h=st.integers(1, 3))
def test_grad_reshape(seed, c, h):
    assert _check_layer([Reshape((c * h * h,))], (c, h, h), 2, seed, "input").max_rel_error < 1e-4


def test_grad_check_skips_kinks():
    # all-zero inputs sit exactly on the ReLU kink; every stencil crosses it
    net = build_network([ReLU()], 0, (4,))
    result = check_gradients(net, np.zeros((1, 4)), linear_loss(), wrt="input")
    assert result.coords.size == 0 and result.skipped == 4


def _full_conditional_discriminator(init_std):
    # 3x32x32 images with 10 label planes, full-size widths
    net = build_network(dcgan_discriminator(3, 32, 10), 0, input_shape=(13, 32, 32), init_std=init_std)
    x = np.random.default_rng(0).uniform(-1, 1, (8, 13, 32, 32))
    return net, x


@pytest.mark.parametrize("mode,init_std", [("eval", 0.02), ("train", 0.05)])
def test_grad_full_conditional_discriminator(mode, init_std):
    net, x = _full_conditional_discriminator(init_std)
    result = check_gradients(net, x, linear_loss(), n_coords=100, mode=mode, dropout_seed=11)
    assert result.coords.size == 100
    assert result.max_rel_error < 1e-4


def test_train_mode_worst_coordinate_converges_with_smaller_step():
    # At the 0.02 init, BatchNorm makes the loss scale-invariant in small conv weights and
    # the O(step^2) truncation term of a 1e-3 stencil can exceed 1e-4 on tiny gradients.
    # Shrinking the step must make backprop and the difference quotient agree.
    net, x = _full_conditional_discriminator(0.02)
    loss = linear_loss()
    result = check_gradients(net, x, loss, n_coords=100, dropout_seed=11)
    worst = result.coords[np.argmax(result.errors)]
    out, trace = forward(net, x, "train", np.random.default_rng(11), update_stats=False)
    analytic = backward(net, trace, loss(out)[1])[0][worst]
    base = net.params.copy()

    def value(delta):
        net.params[...] = base
        net.params[worst] += delta
        return loss(forward(net, x, "train", np.random.default_rng(11), update_stats=False)[0])[0]

    errors = []
    for step in (1e-3, 1e-4, 1e-5):
        numeric = (value(step) - value(-step)) / (2 * step)
        errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
    net.params[...] = base
    assert errors[0] > errors[1] > errors[2]
    assert errors[2] < 1e-6
