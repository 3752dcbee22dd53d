import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bimf.network import (
    DivergenceError,
    OptimizerState,
    Tower,
    backward,
    encoder_forward,
    grad_check,
    item_cnn_forward,
    regression_loss,
    train_epochs,
    user_cnn_forward,
)

from conftest import SMALL_LAYERS

CONV_ONLY = [{"type": "conv", "kernel": 3, "channels": 1}, {"type": "flatten"}]


def naive_conv(img, kernel, bias):
    """Valid cross-correlation of one (H, W) channel, by explicit loops."""
    h, w = img.shape
    k = kernel.shape[0]
    out = np.zeros((h - k + 1, w - k + 1))
    for r in range(h - k + 1):
        for c in range(w - k + 1):
            total = bias
            for a in range(k):
                for b in range(k):
                    total += img[r + a, c + b] * kernel[a, b]
            out[r, c] = total
    return out


def test_default_architecture_shapes():
    t = Tower(latent_dim=50)
    assert t.feature_dim == 128
    assert t.input_shape == (60, 60, 3)
    # conv weights + biases per layer, dense(128), then the head
    sizes = [hi - lo for lo, hi, _ in t.param_slots()]
    assert sizes == [16 * 3 * 25, 16, 32 * 16 * 25, 32, 64 * 32 * 9, 64, 1600 * 128, 128,
                     128 * 50, 50]
    assert t.n_params == sum(sizes)


def test_initialization_scales():
    rng = np.random.default_rng(0)
    fixed = Tower.initialized(rng, std=0.05, latent_dim=8)
    fan = Tower.initialized(rng, std=None, latent_dim=8)
    # conv(5x5, 3 -> 16) before a ReLU, dense(.. -> 128) last, then the linear head
    slots = fan.param_slots()
    weights = [(lo, hi, dims) for lo, hi, dims in slots if len(dims) > 1]
    first, last_dense, head = weights[0], weights[-2], weights[-1]
    assert np.std(fixed.theta[first[0]:first[1]]) == pytest.approx(0.05, rel=0.1)
    assert np.std(fan.theta[first[0]:first[1]]) == pytest.approx(np.sqrt(2 / 75), rel=0.1)
    assert np.std(fan.theta[last_dense[0]:last_dense[1]]) == pytest.approx(
        np.sqrt(1 / last_dense[2][0]), rel=0.1)
    assert np.std(fan.theta[head[0]:head[1]]) == pytest.approx(np.sqrt(1 / 128), rel=0.1)
    biases = [(lo, hi) for lo, hi, dims in slots if len(dims) == 1]
    assert all(not fan.theta[lo:hi].any() for lo, hi in biases)


def test_zero_image_zero_weights():
    t = Tower(latent_dim=50)
    assert np.all(encoder_forward(t, np.zeros((60, 60, 3))) == 0)
    out = item_cnn_forward(t, np.zeros((60, 60, 3)))
    assert out.shape == (50,) and np.all(out == 0)


def test_user_forward_zero_weights():
    t = Tower(SMALL_LAYERS, (16, 16, 3), n_slots=3, latent_dim=7)
    imgs = np.random.default_rng(0).random((3, 16, 16, 3))
    assert np.all(user_cnn_forward(t, imgs) == 0)


def test_identical_images_identical_features():
    t = Tower.initialized(np.random.default_rng(0), layers=SMALL_LAYERS, input_shape=(16, 16, 3))
    img = np.random.default_rng(1).random((16, 16, 3))
    feats = t.features(np.stack([img, img.copy()]))
    assert np.array_equal(feats[0], feats[1])
    assert np.array_equal(encoder_forward(t, img), encoder_forward(t, img))


def test_toy_conv_matches_loops():
    rng = np.random.default_rng(4)
    t = Tower.initialized(rng, std=1.0, layers=CONV_ONLY, input_shape=(4, 4, 1), latent_dim=2)
    t.theta[9] = 0.25  # conv bias
    kernel = t.param_arrays()[0][0, 0]
    img = rng.random((4, 4, 1))
    expected = naive_conv(img[:, :, 0], kernel, 0.25).ravel()
    np.testing.assert_allclose(encoder_forward(t, img), expected, rtol=0, atol=1e-14)


def test_toy_item_tower_matches_conv_plus_dense():
    rng = np.random.default_rng(5)
    t = Tower.initialized(rng, std=1.0, layers=CONV_ONLY, input_shape=(4, 4, 1), latent_dim=3)
    t.theta[-3:] = [0.1, -0.2, 0.3]
    w_conv, b_conv, w_head, b_head = t.param_arrays()
    img = rng.random((4, 4, 1))
    feats = naive_conv(img[:, :, 0], w_conv[0, 0], b_conv[0]).ravel()
    expected = [sum(feats[a] * w_head[a, o] for a in range(4)) + b_head[o] for o in range(3)]
    np.testing.assert_allclose(item_cnn_forward(t, img), expected, atol=1e-14)


def test_stride_two_conv():
    rng = np.random.default_rng(6)
    layers = [{"type": "conv", "kernel": 2, "channels": 1, "stride": 2}]
    t = Tower.initialized(rng, std=1.0, layers=layers, input_shape=(4, 4, 1), latent_dim=1)
    k = t.param_arrays()[0][0, 0]
    img = rng.random((4, 4, 1))
    full = naive_conv(img[:, :, 0], k, 0.0)
    np.testing.assert_allclose(encoder_forward(t, img), full[::2, ::2].ravel(), atol=1e-14)


def test_maxpool_first_max_wins():
    layers = [{"type": "maxpool", "window": 2}]
    t = Tower(layers, (2, 2, 1), latent_dim=1)
    t.theta[:] = 1.0  # head weight 1, bias 1
    x = np.ones((1, 1, 2, 2, 1))
    _, grad = t.loss_and_grad(x, np.zeros((1, 1)), 1.0, 0.0)
    # all four inputs tie; routing goes to the first, but only head params exist
    assert grad.shape == (2,)
    from bimf.network import _pool_backward, _pool_forward
    out, arg = _pool_forward(np.ones((1, 1, 2, 2)), 2)
    assert arg[0, 0, 0, 0] == 0
    dx = _pool_backward(np.ones((1, 1, 1, 1)), (1, 1, 2, 2), arg, 2)
    assert dx[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_single_slot_user_tower_is_head_on_features():
    rng = np.random.default_rng(7)
    t = Tower.initialized(rng, layers=SMALL_LAYERS, input_shape=(16, 16, 3), n_slots=1,
                          latent_dim=5)
    img = rng.random((16, 16, 3))
    w, b = t.param_arrays()[-2:]
    np.testing.assert_allclose(user_cnn_forward(t, img[None]), encoder_forward(t, img) @ w + b,
                               atol=1e-14)


def test_permuted_bundle_with_permuted_head():
    rng = np.random.default_rng(8)
    P = 3
    t = Tower.initialized(rng, layers=SMALL_LAYERS, input_shape=(16, 16, 3), n_slots=P,
                          latent_dim=6)
    imgs = rng.random((P, 16, 16, 3))
    perm = np.array([2, 0, 1])
    F = t.feature_dim
    permuted = t.copy()
    head_w = permuted.param_arrays()[-2]
    blocks = t.param_arrays()[-2].reshape(P, F, 6)
    # slot s of the permuted bundle holds image perm[s]; move its head block along
    head_w[...] = blocks[perm].reshape(P * F, 6)
    np.testing.assert_allclose(user_cnn_forward(permuted, imgs[perm]),
                               user_cnn_forward(t, imgs), rtol=1e-13, atol=1e-14)


def test_bundle_width_mismatch():
    t = Tower(SMALL_LAYERS, (16, 16, 3), n_slots=3, latent_dim=4)
    with pytest.raises(ValueError, match="bundle holds 2"):
        user_cnn_forward(t, np.zeros((2, 16, 16, 3)))
    with pytest.raises(ValueError, match="does not match"):
        encoder_forward(t, np.zeros((15, 16, 3)))


def test_weight_sharing_across_slots():
    rng = np.random.default_rng(9)
    P = 4
    t = Tower.initialized(rng, layers=SMALL_LAYERS, input_shape=(16, 16, 3), n_slots=P,
                          latent_dim=3)
    imgs = rng.random((P, 16, 16, 3))
    before = t.features(imgs)
    lo, hi, _ = t.param_slots()[0]
    t.theta[lo:hi] += 0.01
    after = t.features(imgs)
    for s in range(P):
        assert not np.allclose(before[s], after[s])


def test_forward_is_bit_identical():
    rng = np.random.default_rng(10)
    t = Tower.initialized(rng, layers=SMALL_LAYERS, input_shape=(16, 16, 3), n_slots=2,
                          latent_dim=4)
    x = rng.random((5, 2, 16, 16, 3))
    assert np.array_equal(t.forward(x), t.forward(x.copy()))


# -- loss ---------------------------------------------------------------------


def test_loss_zero_at_exact_fit():
    t = Tower(SMALL_LAYERS, (16, 16, 3), latent_dim=4)
    x = np.random.default_rng(0).random((3, 1, 16, 16, 3))
    assert regression_loss(t, x, np.zeros((3, 4)), 1.0, 1.0) == 0.0


def test_loss_single_unit_target():
    t = Tower(SMALL_LAYERS, (16, 16, 3), latent_dim=4)
    x = np.zeros((1, 1, 16, 16, 3))
    e1 = np.array([[1.0, 0, 0, 0]])
    assert regression_loss(t, x, e1, 2.0, 1.0) == 1.0


def test_loss_linear_in_weight_lambda():
    rng = np.random.default_rng(1)
    t = Tower.initialized(rng, layers=SMALL_LAYERS, input_shape=(16, 16, 3), latent_dim=4)
    x = rng.random((3, 1, 16, 16, 3))
    y = rng.normal(size=(3, 4))
    a = regression_loss(t, x, y, 1.5, 0.5)
    b = regression_loss(t, x, y, 1.5, 1.0)
    assert b - a == pytest.approx(0.25 * t.weight_norm2(), rel=1e-12)


def test_regularizer_only_when_target_weight_zero():
    rng = np.random.default_rng(2)
    t = Tower.initialized(rng, layers=SMALL_LAYERS, input_shape=(16, 16, 3), latent_dim=4)
    x = rng.random((3, 1, 16, 16, 3))
    y = rng.normal(size=(3, 4))
    assert regression_loss(t, x, y, 0.0, 0.7) == 0.5 * 0.7 * float(t.theta @ t.theta)


def test_loss_length_mismatch():
    t = Tower(SMALL_LAYERS, (16, 16, 3), latent_dim=4)
    with pytest.raises(ValueError, match="targets"):
        regression_loss(t, np.zeros((3, 1, 16, 16, 3)), np.zeros((2, 4)), 1.0, 1.0)


# -- gradients ----------------------------------------------------------------


def test_gradient_prior_only():
    rng = np.random.default_rng(3)
    t = Tower.initialized(rng, layers=SMALL_LAYERS, input_shape=(16, 16, 3), latent_dim=4)
    x = rng.random((2, 1, 16, 16, 3))
    grads = backward(t, x, rng.normal(size=(2, 4)), 0.0, 0.3)
    for g, w in zip(grads, t.param_arrays()):
        assert np.array_equal(g, 0.3 * w)


def test_gradient_zero_at_optimum():
    t = Tower(SMALL_LAYERS, (16, 16, 3), latent_dim=4)
    x = np.random.default_rng(4).random((2, 1, 16, 16, 3))
    for g in backward(t, x, np.zeros((2, 4)), 1.0, 1.0):
        assert not g.any()


def test_grad_check_small_net():
    rng = np.random.default_rng(5)
    t = Tower.initialized(rng, std=0.3, layers=SMALL_LAYERS, input_shape=(16, 16, 3),
                          n_slots=2, latent_dim=4)
    x = rng.random((3, 2, 16, 16, 3))
    y = rng.normal(size=(3, 4))
    assert grad_check(t, x, y, 1.3, 0.2, n_samples=100, seed=1) < 1e-5


@pytest.mark.slow
def test_grad_check_default_architecture():
    rng = np.random.default_rng(6)
    t = Tower.initialized(rng, latent_dim=50)
    x = rng.random((2, 1, 60, 60, 3))
    y = rng.normal(size=(2, 50))
    assert grad_check(t, x, y, 1.0, 0.5, n_samples=8, seed=0) < 1e-5


def test_grad_check_negative_control():
    rng = np.random.default_rng(7)
    t = Tower.initialized(rng, std=0.3, layers=SMALL_LAYERS, input_shape=(16, 16, 3),
                          latent_dim=4)
    x = rng.random((3, 1, 16, 16, 3))
    y = rng.normal(size=(3, 4))

    def dropped_prior(theta):
        return t.loss_and_grad(x, y, 1.0, 0.0, theta)[1]

    assert grad_check(t, x, y, 1.0, 0.5, n_samples=30, grad_fn=dropped_prior) > 1e-2


def test_grad_check_all_zero_is_zero():
    t = Tower(SMALL_LAYERS, (16, 16, 3), latent_dim=4)
    x = np.zeros((1, 1, 16, 16, 3))
    assert grad_check(t, x, np.zeros((1, 4)), 1.0, 1.0, n_samples=20) == 0.0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 3), st.sampled_from([1, 2]))
def test_grad_check_random_architectures(seed, slots, stride):
    rng = np.random.default_rng(seed)
    layers = [
        {"type": "conv", "kernel": int(rng.integers(2, 4)), "channels": int(rng.integers(1, 5)),
         "stride": stride},
        {"type": "relu"},
        {"type": "maxpool", "window": int(rng.integers(1, 3))},
        {"type": "flatten"},
        {"type": "dense", "out": int(rng.integers(2, 8))},
        {"type": "relu"},
        {"type": "dense", "out": 5},
    ]
    t = Tower.initialized(rng, std=0.4, layers=layers, input_shape=(9, 9, 2), n_slots=slots,
                          latent_dim=3)
    x = rng.random((2, slots, 9, 9, 2))
    y = rng.normal(size=(2, 3))
    assert grad_check(t, x, y, 1.0, 0.1, n_samples=40, seed=seed % 1000) < 1e-5


# -- training -----------------------------------------------------------------


def linear_problem(seed=0, n=40):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 1, 2, 2, 1))
    true_w = rng.normal(size=(4, 2))
    y = x.reshape(n, 4) @ true_w + 0.3 + 0.05 * rng.normal(size=(n, 2))
    return x, y


def ridge_oracle(x, y, lam_t, lam_w):
    X = np.column_stack([x.reshape(len(x), -1), np.ones(len(x))])
    A = X.T @ X + (lam_w / lam_t) * np.eye(X.shape[1])
    return np.linalg.solve(A, X.T @ y)


def test_zero_learning_rate_keeps_weights():
    rng = np.random.default_rng(0)
    t = Tower.initialized(rng, layers=SMALL_LAYERS, input_shape=(16, 16, 3), latent_dim=3)
    before = t.theta.copy()
    x = rng.random((10, 1, 16, 16, 3))
    trace = train_epochs(t, x, rng.normal(size=(10, 3)), 1.0, 1.0,
                         OptimizerState(learning_rate=0.0), epochs=3)
    assert np.array_equal(t.theta, before)
    assert len(trace) == 4 and len(set(trace)) == 1


def test_linear_model_reaches_ridge_solution():
    x, y = linear_problem()
    lam_t, lam_w = 2.0, 3.0
    t = Tower([], (2, 2, 1), latent_dim=2)
    opt = OptimizerState(learning_rate=0.05, momentum=0.9, batch_size=len(x))
    train_epochs(t, x, y, lam_t, lam_w, opt, epochs=1500)
    w, b = t.param_arrays()
    expected = ridge_oracle(x, y, lam_t, lam_w)
    np.testing.assert_allclose(np.vstack([w, b]), expected, atol=1e-4)


def test_full_batch_trace_non_increasing():
    x, y = linear_problem(1)
    t = Tower([], (2, 2, 1), latent_dim=2)
    opt = OptimizerState(learning_rate=0.01, momentum=0.0, batch_size=len(x))
    trace = train_epochs(t, x, y, 1.0, 0.5, opt, epochs=200)
    assert all(b <= a for a, b in zip(trace, trace[1:]))
    assert trace[-1] < trace[0]


def test_minibatch_training_is_seeded():
    x, y = linear_problem(2)
    runs = []
    for _ in range(2):
        t = Tower([], (2, 2, 1), latent_dim=2)
        opt = OptimizerState(learning_rate=0.05, batch_size=7, seed=11)
        runs.append((train_epochs(t, x, y, 1.0, 0.5, opt, epochs=5), t.theta.copy()))
    assert runs[0][0] == runs[1][0]
    assert np.array_equal(runs[0][1], runs[1][1])


def test_divergence_is_reported():
    x, y = linear_problem(3)
    t = Tower([], (2, 2, 1), latent_dim=2)
    opt = OptimizerState(learning_rate=1e6, momentum=0.0, batch_size=len(x))
    with pytest.raises(DivergenceError, match="learning rate"):
        with np.errstate(all="ignore"):
            train_epochs(t, x, y, 1.0, 0.5, opt, epochs=50)


def test_bad_layer_specs():
    with pytest.raises(ValueError, match="unknown type"):
        Tower([{"type": "softmax"}], (8, 8, 1))
    with pytest.raises(ValueError, match="larger than input"):
        Tower([{"type": "conv", "kernel": 9, "channels": 1}], (8, 8, 1))
    with pytest.raises(ValueError, match="unknown keys"):
        Tower([{"type": "relu", "alpha": 0.1}], (8, 8, 1))
