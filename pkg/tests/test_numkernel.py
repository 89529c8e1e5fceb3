import numpy as np
import pytest

from numkernel import (
    LstmCellParams,
    SgdConfig,
    Tensor,
    clip_grad_norm,
    cross_entropy,
    dropout,
    grad_check,
    learning_rate,
    linear_backward,
    linear_forward,
    lstm_cell_backward,
    lstm_cell_step,
    lstm_sequence_backward,
    lstm_sequence_forward,
    resolve_dtype,
    sgd_step,
    sigmoid,
    smooth_l1,
)
from rsdcommon import ConfigError, DimensionError, NumericError

SEEDS = range(20)


def _lstm_tensors(rng, D, H):
    params = LstmCellParams.initialize(rng, D, H, np.float64)
    return {
        "W": Tensor("W", params.W),
        "U": Tensor("U", params.U),
        "b": Tensor("b", params.b),
    }


def _cell(tensors):
    return LstmCellParams(tensors["W"].data, tensors["U"].data, tensors["b"].data)


# --- gradient fidelity ------------------------------------------------------


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 4))
    target = rng.standard_normal((5, 3))
    params = {"W": Tensor("W", rng.standard_normal((4, 3))), "b": Tensor("b", rng.standard_normal(3))}

    def fragment():
        y, cache = linear_forward(x, params["W"].data, params["b"].data)
        _, dW, db = linear_backward(y - target, cache)
        params["W"].grad, params["b"].grad = dW, db
        return float(0.5 * np.sum((y - target) ** 2))

    assert grad_check(fragment, params, seed=seed) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_lstm_cell_gradients(seed):
    rng = np.random.default_rng(seed)
    D, H = 3, 4
    tensors = _lstm_tensors(rng, D, H)
    x = rng.standard_normal(D)
    h_prev = rng.standard_normal(H) * 0.5
    c_prev = rng.standard_normal(H) * 0.5
    wh, wc = rng.standard_normal(H), rng.standard_normal(H)

    def fragment():
        params = _cell(tensors)
        h, c, cache = lstm_cell_step(params, x, h_prev, c_prev)
        _, _, _, grads = lstm_cell_backward(params, wh, wc, cache)
        for name in ("W", "U", "b"):
            tensors[name].grad = grads[name]
        return float(wh @ h + wc @ c)

    assert grad_check(fragment, tensors, seed=seed) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_lstm_sequence_gradients(seed):
    rng = np.random.default_rng(seed)
    T, D, H = 20, 3, 8
    tensors = _lstm_tensors(rng, D, H)
    xs = rng.standard_normal((T, D))
    weights = rng.standard_normal((T, H))

    def fragment():
        params = _cell(tensors)
        hs, _, cache = lstm_sequence_forward(params, xs)
        _, grads = lstm_sequence_backward(params, weights, cache)
        for name in ("W", "U", "b"):
            tensors[name].grad = grads[name]
        return float(np.sum(weights * hs))

    assert grad_check(fragment, tensors, seed=seed, max_entries=40, floor=1e-6) < 1e-4


def test_lstm_sequence_input_gradient_matches_finite_difference():
    rng = np.random.default_rng(0)
    params = LstmCellParams.initialize(rng, 3, 4, np.float64)
    xs = rng.standard_normal((6, 3))
    weights = rng.standard_normal((6, 4))
    hs, _, cache = lstm_sequence_forward(params, xs)
    dxs, _ = lstm_sequence_backward(params, weights, cache)
    eps = 1e-6
    bumped = xs.copy()
    bumped[2, 1] += eps
    plus = np.sum(weights * lstm_sequence_forward(params, bumped)[0])
    bumped[2, 1] -= 2 * eps
    minus = np.sum(weights * lstm_sequence_forward(params, bumped)[0])
    assert dxs[2, 1] == pytest.approx((plus - minus) / (2 * eps), rel=1e-5)


@pytest.mark.parametrize("seed", SEEDS)
def test_smooth_l1_gradients(seed):
    rng = np.random.default_rng(seed)
    target = rng.standard_normal(12)
    # keep every residual away from the |d| = 1 transition
    offsets = rng.choice([-2.5, -0.4, 0.3, 1.8], size=12)
    params = {"p": Tensor("p", target + offsets)}

    def fragment():
        loss, grad = smooth_l1(params["p"].data, target)
        params["p"].grad = grad
        return float(loss.sum())

    assert grad_check(fragment, params, seed=seed) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy_gradients(seed):
    rng = np.random.default_rng(seed)
    classes = rng.integers(0, 5, size=6)
    params = {"z": Tensor("z", rng.standard_normal((6, 5)))}

    def fragment():
        loss, grad = cross_entropy(params["z"].data, classes)
        params["z"].grad = grad
        return loss

    assert grad_check(fragment, params, seed=seed) < 1e-4


# --- layers and losses ------------------------------------------------------


def test_linear_rejects_mismatched_shapes():
    with pytest.raises(DimensionError):
        linear_forward(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        linear_forward(np.zeros((2, 3)), np.zeros((3, 2)), np.zeros(3))


def test_zero_hidden_state_and_zero_weights_keep_cell_at_zero():
    H, D = 3, 2
    params = LstmCellParams(np.zeros((4 * H, D)), np.zeros((4 * H, H)), np.zeros(4 * H))
    h, c, _ = lstm_cell_step(params, np.ones(D), np.zeros(H), np.zeros(H))
    # g = tanh(0) = 0, so nothing is written into the cell
    assert np.all(c == 0)
    assert np.all(h == 0)


def test_saturated_gates_carry_the_cell_state():
    H, D = 3, 2
    b = np.zeros(4 * H)
    b[:H], b[H : 2 * H] = -20.0, 20.0
    params = LstmCellParams(np.zeros((4 * H, D)), np.zeros((4 * H, H)), b)
    c_prev = np.array([0.3, -1.2, 2.0])
    _, c, _ = lstm_cell_step(params, np.ones(D), np.full(H, 0.5), c_prev)
    np.testing.assert_allclose(c, c_prev, atol=1e-6)


def test_lstm_initialization_sets_forget_bias():
    params = LstmCellParams.initialize(np.random.default_rng(0), 5, 4, forget_bias=1.0)
    assert np.all(params.b[4:8] == 1.0)
    assert np.all(params.b[:4] == 0.0) and np.all(params.b[8:] == 0.0)
    assert params.W.dtype == np.float32
    assert np.all(np.abs(params.W) <= 1 / np.sqrt(5))


def test_lstm_step_rejects_wrong_input_size():
    params = LstmCellParams.initialize(np.random.default_rng(0), 3, 2)
    with pytest.raises(DimensionError):
        lstm_cell_step(params, np.zeros(4, dtype=np.float32), np.zeros(2), np.zeros(2))


def test_lstm_sequence_matches_stepwise_cell():
    rng = np.random.default_rng(1)
    params = LstmCellParams.initialize(rng, 3, 4, np.float64)
    xs = rng.standard_normal((7, 3))
    hs, cs, _ = lstm_sequence_forward(params, xs)
    h, c = np.zeros(4), np.zeros(4)
    for t in range(7):
        h, c, _ = lstm_cell_step(params, xs[t], h, c)
        np.testing.assert_allclose(hs[t], h, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(cs[t], c, rtol=1e-12, atol=1e-14)


def test_smooth_l1_piecewise_values():
    loss, grad = smooth_l1(np.array([0.5, 1.0, -3.0]), np.zeros(3))
    np.testing.assert_allclose(loss, [0.125, 0.5, 2.5])
    np.testing.assert_allclose(grad, [0.5, 1.0, -1.0])


def test_cross_entropy_uniform_logits():
    loss, grad = cross_entropy(np.zeros(4), 2)
    assert loss == pytest.approx(np.log(4))
    np.testing.assert_allclose(grad, [0.25, 0.25, -0.75, 0.25])


def test_cross_entropy_confident_logits():
    logits = np.zeros(10)
    logits[3] = 20.0
    loss, _ = cross_entropy(logits, 3)
    assert loss < 1e-6


def test_cross_entropy_class_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy(np.zeros(3), 3)


def test_sigmoid_is_stable_at_extremes():
    out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


def test_dropout_eval_is_identity_and_train_preserves_mean():
    x = np.ones((2000, 10), dtype=np.float32)
    y, mask = dropout(x, 0.3, train=False)
    assert y is x and mask is None
    y, mask = dropout(x, 0.3, train=True, rng=np.random.default_rng(0))
    assert y.dtype == np.float32
    assert abs(float(y.mean()) - 1.0) < 0.02
    assert set(np.unique(mask)) <= {0.0, np.float32(1) / np.float32(0.7)}
    assert abs(float(np.mean(y == 0)) - 0.3) < 0.01


def test_dropout_rejects_invalid_probability():
    with pytest.raises(ConfigError):
        dropout(np.ones(3), 1.0, train=True, rng=np.random.default_rng(0))


# --- optimization -----------------------------------------------------------


def test_sgd_single_step_without_momentum():
    param = Tensor("w", np.zeros(1), grad=np.ones(1))
    sgd_step({"w": param}, {}, SgdConfig(lr0=0.1, momentum=0.0), iteration=0)
    assert param.data[0] == pytest.approx(-0.1)


def test_sgd_two_steps_with_momentum():
    param = Tensor("w", np.zeros(1))
    state = {}
    cfg = SgdConfig(lr0=0.1, momentum=0.9)
    for it in range(2):
        param.grad = np.ones(1)
        sgd_step({"w": param}, state, cfg, it)
    assert param.data[0] == pytest.approx(-0.29)


def test_sgd_weight_decay_pulls_towards_zero():
    param = Tensor("w", np.array([2.0]), grad=np.zeros(1))
    sgd_step({"w": param}, {}, SgdConfig(lr0=0.1, momentum=0.0, weight_decay=0.5), 0)
    assert param.data[0] == pytest.approx(1.9)


def test_sgd_rejects_non_finite_gradient():
    param = Tensor("lstm.W", np.zeros(2), grad=np.array([1.0, np.nan]))
    with pytest.raises(NumericError, match="lstm.W"):
        sgd_step({"lstm.W": param}, {}, SgdConfig(lr0=0.1), iteration=7)


def test_learning_rate_step_schedule():
    cfg = SgdConfig(lr0=1e-3, decay_factor=10, decay_every=20000)
    assert learning_rate(cfg, 0) == 1e-3
    assert learning_rate(cfg, 19999) == 1e-3
    assert learning_rate(cfg, 20000) == pytest.approx(1e-4)
    rates = [learning_rate(cfg, it) for it in range(0, 100000, 5000)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_sgd_config_validation():
    with pytest.raises(ConfigError):
        SgdConfig(lr0=0.0)
    with pytest.raises(ConfigError):
        SgdConfig(lr0=0.1, momentum=1.0)
    with pytest.raises(ConfigError):
        SgdConfig(lr0=0.1, decay_factor=0.5)


def test_sgd_monotonically_reduces_convex_quadratic():
    A = np.diag([1.0, 3.0, 0.5])
    param = Tensor("w", np.array([1.0, -2.0, 4.0]))
    cfg = SgdConfig(lr0=0.05, momentum=0.0)
    losses = []
    for it in range(50):
        losses.append(0.5 * param.data @ A @ param.data)
        param.grad = A @ param.data
        sgd_step({"w": param}, {}, cfg, it)
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_clip_grad_norm_scales_globally():
    params = {
        "a": Tensor("a", np.zeros(2), grad=np.array([3.0, 0.0])),
        "b": Tensor("b", np.zeros(1), grad=np.array([4.0])),
    }
    norm = clip_grad_norm(params, 1.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(params["a"].grad, [0.6, 0.0])
    np.testing.assert_allclose(params["b"].grad, [0.8])


def test_clip_grad_norm_disabled():
    params = {"a": Tensor("a", np.zeros(1), grad=np.array([10.0]))}
    clip_grad_norm(params, 0.0)
    assert params["a"].grad[0] == 10.0


def test_resolve_dtype():
    assert resolve_dtype("f64") is np.float64
    with pytest.raises(ConfigError):
        resolve_dtype("f16")
