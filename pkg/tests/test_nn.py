import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rml.errors import ConfigurationError, NonFiniteError, UsageError
from rml.nn import AdamState, InputSplit, MlpGenerator, adam_step, adam_update


def small_net(seed=0, widths=(3, 16, 16, 2)):
    return MlpGenerator(widths, rng=np.random.default_rng(seed))


def test_zero_network_outputs_zero():
    net = MlpGenerator((4, 8, 3))  # no rng: all-zero weights
    x = np.random.default_rng(1).standard_normal((5, 4))
    assert np.array_equal(net.forward(x), np.zeros((5, 3)))


def test_identity_linear_layer():
    net = MlpGenerator((3, 3))
    net.weights[0] = np.eye(3)
    v = np.array([[1.5, -2.0, 0.25]])
    assert np.array_equal(net.forward(v), v)


def test_forward_shape_and_dimension_error():
    net = small_net()
    assert net.forward(np.ones((3, 3))).shape == (3, 2)
    with pytest.raises(ConfigurationError):
        net.forward(np.ones((3, 4)))


def test_input_split_must_match_width():
    with pytest.raises(ConfigurationError):
        MlpGenerator((5, 2), split=InputSplit(2, 0, 1, 1))


def test_backward_without_forward_is_usage_error():
    with pytest.raises(UsageError):
        small_net().backward(np.ones((3, 2)))


def test_backward_adjoint_shape_checked():
    net = small_net()
    net.forward(np.ones((3, 3)))
    with pytest.raises(UsageError):
        net.backward(np.ones((4, 2)))


def test_zero_adjoint_gives_zero_gradient():
    net = small_net()
    net.forward(np.random.default_rng(2).standard_normal((6, 3)))
    assert all(np.all(g == 0) for g in net.backward(np.zeros((6, 2))))


def test_linear_least_squares_optimum_has_zero_gradient():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((50, 3))
    y = x @ np.array([[1.0], [-2.0], [0.5]]) + 0.3
    net = MlpGenerator((3, 1))
    design = np.hstack([x, np.ones((50, 1))])
    coef = np.linalg.lstsq(design, y, rcond=None)[0]
    net.weights[0] = coef[:3]
    net.biases[0] = coef[3]
    out = net.forward(x)
    grads = net.backward(2 * (out - y) / 50)
    assert max(np.abs(g).max() for g in grads) < 1e-10


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_squared_loss_gradient_matches_finite_differences(seed, fd, rel_err):
    rng = np.random.default_rng(seed)
    net = small_net(seed)
    x = rng.standard_normal((7, 3))
    y = rng.standard_normal((7, 2))

    def loss():
        return float(np.mean(np.sum((net.forward(x) - y) ** 2, axis=1)))

    out = net.forward(x)
    grads = net.backward(2 * (out - y) / 7)
    assert rel_err(grads, fd(loss, net.params())) < 1e-4


def test_input_gradient_matches_finite_differences(fd, rel_err):
    rng = np.random.default_rng(4)
    net = small_net(4)
    x = rng.standard_normal((5, 3))
    w = rng.standard_normal((5, 2))

    def loss():
        return float(np.sum(net.forward(x) * w))

    net.forward(x)
    assert rel_err([net.input_gradient(w)], fd(loss, [x])) < 1e-4


def test_adam_zero_gradient_leaves_parameters():
    net = small_net()
    before = [p.copy() for p in net.params()]
    state = AdamState.for_net(net, lr=0.1)
    adam_step(net, state, [np.zeros_like(p) for p in net.params()])
    assert state.step == 1
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params()))


def test_adam_first_step_is_lr_times_sign():
    theta = np.array([0.0, 1.0, -2.0])
    g = np.array([0.3, -5.0, 1e-3])
    state = AdamState.for_params([theta], lr=0.01)
    adam_update([theta], [g], state)
    # bias-corrected first step: m_hat / sqrt(v_hat) = sign(g) up to eps
    assert np.allclose(theta - np.array([0.0, 1.0, -2.0]), -0.01 * np.sign(g), rtol=1e-4)


def _scalar_adam(theta, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    # independent scalar re-implementation, used as the oracle
    m = v = 0.0
    for k in range(1, steps + 1):
        g = 2 * (theta - 3.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**k)) / ((v / (1 - b2**k)) ** 0.5 + eps)
    return theta


def test_adam_quadratic_converges_and_matches_scalar_oracle():
    theta = np.array([0.0])
    state = AdamState.for_params([theta], lr=0.1)
    for _ in range(500):
        adam_update([theta], [2 * (theta - 3.0)], state)
    assert abs(theta[0] - 3.0) < 1e-2
    assert theta[0] == pytest.approx(_scalar_adam(0.0, 0.1, 500), abs=1e-12)


def test_adam_non_finite_gradient_names_block():
    net = small_net()
    grads = [np.zeros_like(p) for p in net.params()]
    grads[2][0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="W1"):
        adam_step(net, AdamState.for_net(net), grads)


def test_adam_step_counter_strictly_increases():
    theta = np.zeros(2)
    state = AdamState.for_params([theta])
    steps = []
    for _ in range(4):
        adam_update([theta], [np.ones(2)], state)
        steps.append(state.step)
    assert steps == [1, 2, 3, 4]


def test_checkpoint_round_trip_is_lossless(tmp_path):
    net = small_net(5)
    path = tmp_path / "net.json"
    net.save(path)
    back = MlpGenerator.load(path)
    assert all(np.array_equal(a, b) for a, b in zip(net.params(), back.params()))
    assert json.loads(path.read_text())["widths"] == [3, 16, 16, 2]


def test_training_trajectory_is_bitwise_deterministic():
    def trajectory(seed):
        rng = np.random.default_rng(seed)
        net = small_net(seed)
        state = AdamState.for_net(net, lr=1e-2)
        for _ in range(20):
            x = rng.standard_normal((8, 3))
            out = net.forward(x)
            adam_step(net, state, net.backward(out / 8))
        return [p.copy() for p in net.params()]

    a, b = trajectory(11), trajectory(11)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 9), width=st.integers(1, 12), seed=st.integers(0, 2**16))
def test_forward_returns_one_row_per_input(n, width, seed):
    net = MlpGenerator((2, width, 3), rng=np.random.default_rng(seed))
    out = net.forward(np.random.default_rng(seed).standard_normal((n, 2)))
    assert out.shape == (n, 3)
    assert np.all(np.isfinite(out))
