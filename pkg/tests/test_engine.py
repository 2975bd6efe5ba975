import numpy as np
import pytest

from rml.bridge import DimensionDropBridge, IdentityBridge, MatchedMarginalBridge, PoolingBridge
from rml.engine import (
    GeneratorStack,
    TrainConfig,
    alternating_generate,
    build_field,
    flow_ode_generate,
    fm_train,
    reverse_markov_sample,
    train,
    two_point_field,
)
from rml.errors import ConfigurationError, TrainingDivergence, UsageError
from rml.experiments import stratified_normal, two_point_target
from rml.gmm import GmmReverseOracle
from rml.metrics import wasserstein2_1d
from rml.scoring import energy_distance, engression_loss


def fast_cfg(**kw):
    base = dict(iterations=3000, batch_size=128, learning_rate=1e-2, schedule="cosine")
    base.update(kw)
    return TrainConfig(**base)


class IdentityKernel:
    def __init__(self, bridge):
        self.bridge = bridge

    def step(self, t, x_t, rng, y=None):
        return x_t


def test_train_config_validation_and_schedule():
    with pytest.raises(ConfigurationError):
        TrainConfig(iterations=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(schedule="step")
    cfg = TrainConfig(iterations=10, learning_rate=0.2, schedule="cosine")
    assert cfg.lr_at(0) == pytest.approx(0.2)
    assert cfg.lr_at(5) == pytest.approx(0.1)
    assert TrainConfig(learning_rate=0.2).lr_at(7) == 0.2


def test_stack_shapes_shared_and_separate():
    shared = GeneratorStack(MatchedMarginalBridge("x-process", 3, 2), hidden=(8,), rng=np.random.default_rng(0))
    assert shared.shared and len(shared.unique_nets()) == 1
    assert shared.net(1).in_dim == 2 + 1 + 2 and shared.net(1).out_dim == 2
    sep = GeneratorStack(DimensionDropBridge(3), hidden=(8,), rng=np.random.default_rng(0))
    assert not sep.shared
    for t in (1, 2, 3):
        assert sep.net(t).in_dim == sep.bridge.dim(t) + sep.noise_dims[t]
        assert sep.net(t).out_dim == sep.bridge.dim(t - 1)
    with pytest.raises(ConfigurationError):
        GeneratorStack(PoolingBridge(4, 2), shared=True)


def test_untrained_stack_refuses_to_sample():
    stack = GeneratorStack(MatchedMarginalBridge("x-process", 2), hidden=(4,), rng=np.random.default_rng(0))
    with pytest.raises(UsageError):
        reverse_markov_sample(stack, 5, np.random.default_rng(0))


@pytest.mark.parametrize("scheme", ["flow-matching", "diffusion", "x-process"])
def test_single_step_oracle_reproduces_target(scheme):
    rng = np.random.default_rng(1)
    oracle = GmmReverseOracle(scheme, 0.25, 1)
    x = reverse_markov_sample(oracle, 10_000, rng)
    assert energy_distance(x, oracle.spec.sample(10_000, rng)) < 0.02


def test_identity_bridge_with_identity_kernel_returns_terminal_draw():
    bridge = IdentityBridge(3, 2, lambda n, rng: rng.standard_normal((n, 2)) + 4)
    out = reverse_markov_sample(IdentityKernel(bridge), 6, np.random.default_rng(5))
    assert np.array_equal(out, bridge.sample_terminal(6, np.random.default_rng(5)))


def test_return_path_lists_every_state():
    oracle = GmmReverseOracle("x-process", 0.25, 3)
    path = reverse_markov_sample(oracle, 10, np.random.default_rng(0), return_path=True)
    assert len(path) == 4 and all(p.shape == (10, 1) for p in path)


def test_point_mass_target_collapses():
    rng = np.random.default_rng(0)
    c = np.array([1.0, -2.0])
    stack = GeneratorStack(MatchedMarginalBridge("x-process", 2, 2), hidden=(32, 32), rng=rng)
    train(stack, np.tile(c, (500, 1)), fast_cfg(), rng)
    x1 = stack.bridge.sample_path(np.tile(c, (1000, 1)), rng)[1]
    assert np.linalg.norm(stack.step(1, x1, rng) - c, axis=1).mean() < 0.05


def test_single_step_training_is_engression():
    data = np.random.default_rng(3).standard_normal((64, 2))
    stack = GeneratorStack(MatchedMarginalBridge("x-process", 1, 2), hidden=(8,), rng=np.random.default_rng(4))
    net0 = stack.net(1).copy()
    result = train(stack, data, TrainConfig(iterations=1, batch_size=16), np.random.default_rng(9))
    # replay the first iteration's draws and evaluate the plain engression loss
    rng = np.random.default_rng(9)
    assert int(rng.integers(1, 2)) == 1
    idx = rng.integers(0, 64, size=16)
    _, x1 = stack.bridge.sample_pair(1, data[idx], rng)
    eps, eps2 = rng.standard_normal((16, 2)), rng.standard_normal((16, 2))
    cond = np.hstack([x1, np.ones((16, 1))])
    expected, _ = engression_loss(net0, data[idx], cond, eps, eps2)
    assert result.trace[0, 2] == expected


def test_each_iteration_updates_one_step():
    rng = np.random.default_rng(0)
    stack = GeneratorStack(DimensionDropBridge(3), hidden=(4,), rng=rng)
    before = {t: [p.copy() for p in stack.net(t).params()] for t in (1, 2, 3)}
    result = train(stack, rng.standard_normal((50, 3)), TrainConfig(iterations=1, batch_size=8), rng)
    t = int(result.trace[0, 1])
    for k in (1, 2, 3):
        changed = any(not np.array_equal(a, b) for a, b in zip(before[k], stack.net(k).params()))
        assert changed == (k == t)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_iteration():
    rng = np.random.default_rng(0)
    stack = GeneratorStack(MatchedMarginalBridge("x-process", 2), hidden=(4,), rng=rng)
    data = np.full((10, 1), np.inf)
    with pytest.raises(TrainingDivergence) as info:
        train(stack, data, TrainConfig(iterations=5, batch_size=4), rng)
    assert info.value.iteration == 0


def test_data_dimension_checked():
    stack = GeneratorStack(MatchedMarginalBridge("x-process", 2, 2), hidden=(4,), rng=np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        train(stack, np.zeros((5, 3)), TrainConfig(iterations=1), np.random.default_rng(0))


def test_stack_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    stack = GeneratorStack(DimensionDropBridge(3), hidden=(6,), rng=rng)
    train(stack, rng.standard_normal((40, 3)), TrainConfig(iterations=20, batch_size=8), rng)
    stack.save(tmp_path)
    back = GeneratorStack.load(tmp_path)
    a = reverse_markov_sample(stack, 7, np.random.default_rng(3))
    b = reverse_markov_sample(back, 7, np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_training_is_deterministic():
    def run():
        rng = np.random.default_rng(42)
        stack = GeneratorStack(MatchedMarginalBridge("diffusion", 3), hidden=(8,), rng=rng)
        return train(stack, rng.standard_normal((30, 1)), TrainConfig(iterations=30, batch_size=8), rng).trace

    assert np.array_equal(run(), run())


def test_running_mean():
    from rml.engine import TrainResult

    trace = np.column_stack([np.arange(5), np.ones(5), np.arange(5.0)])
    assert TrainResult(trace).running_mean(2).tolist() == [0.5, 1.5, 2.5, 3.5]
    assert TrainResult(trace).running_mean(10).tolist() == [2.0]


def test_alternating_with_identity_schedule_matches_plain_generation():
    oracle = GmmReverseOracle("x-process", 0.25, 4)
    plain = reverse_markov_sample(oracle, 10_000, np.random.default_rng(1))
    alt = alternating_generate(oracle, list(range(5)), 10_000, np.random.default_rng(2))
    assert energy_distance(plain, alt) < 0.02


@pytest.mark.parametrize("schedule", [None, [0, 1, 0, 3, 0]])
def test_alternating_with_exact_kernels_hits_target(schedule):
    rng = np.random.default_rng(3)
    oracle = GmmReverseOracle("x-process", 0.25, 4)
    x = alternating_generate(oracle, schedule, 10_000, rng)
    assert energy_distance(x, oracle.spec.sample(10_000, rng)) < 0.02


def test_alternating_schedule_errors():
    oracle = GmmReverseOracle("x-process", 0.25, 3)
    with pytest.raises(ConfigurationError):
        alternating_generate(oracle, [0, 2, 0, 0], 5, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        alternating_generate(oracle, [0, 0], 5, np.random.default_rng(0))
    rng = np.random.default_rng(0)
    stack = GeneratorStack(DimensionDropBridge(3), hidden=(4,), rng=rng)
    stack.trained = True
    with pytest.raises(ConfigurationError):
        alternating_generate(stack, None, 5, rng)


def test_fm_field_on_point_mass():
    rng = np.random.default_rng(0)
    field = build_field(1, hidden=(32, 32), rng=rng)
    fm_train(field, np.zeros((500, 1)), fast_cfg(iterations=5000), rng)
    s = rng.uniform(0, 1, 4000)
    eps = rng.standard_normal(4000)
    out = field.forward(np.column_stack([s * eps, s]))[:, 0]
    # with X = 0, h = s eps and the optimal field is h / s = eps
    assert np.sqrt(np.mean((out - eps) ** 2)) < 0.05


def test_fm_zero_field_loss_is_variance_floor():
    from rml.scoring import fm_regression_loss

    rng = np.random.default_rng(1)
    x0, eps = rng.standard_normal((50_000, 1)) + 2, rng.standard_normal((50_000, 1))
    field = build_field(1, hidden=(4,))
    loss, _ = fm_regression_loss(field, x0, eps, rng.random(50_000))
    assert loss == pytest.approx(np.mean((eps - x0) ** 2), rel=1e-12)


def test_flow_ode_constant_field():
    x_T = np.random.default_rng(0).standard_normal((6, 2))
    c = np.array([0.5, -1.0])
    out = flow_ode_generate(lambda x, s, y=None: np.broadcast_to(c, x.shape), 7, 6, None, x_T=x_T)
    assert np.allclose(out, x_T - c, atol=1e-14)


def test_flow_ode_rejects_zero_steps():
    with pytest.raises(ConfigurationError):
        flow_ode_generate(two_point_field, 0, 5, np.random.default_rng(0), dim=1)


def test_flow_ode_error_decreases_with_steps():
    n = 4000
    x_T = stratified_normal(n, np.random.default_rng(0))[:, None]
    target = two_point_target(n)
    w2 = [wasserstein2_1d(flow_ode_generate(two_point_field, T, n, None, x_T=x_T), target) for T in (2, 5, 10, 50)]
    assert all(a > b for a, b in zip(w2, w2[1:]))
    assert w2[-1] < 0.1


def test_flow_ode_coarse_worse_than_fine_in_every_replication():
    target = two_point_target(2000)
    for seed in range(20):
        x_T = np.random.default_rng(seed).standard_normal((2000, 1))
        coarse = wasserstein2_1d(flow_ode_generate(two_point_field, 2, 0, None, x_T=x_T), target)
        fine = wasserstein2_1d(flow_ode_generate(two_point_field, 50, 0, None, x_T=x_T), target)
        assert coarse > fine


def test_two_point_field_is_posterior_velocity():
    # Monte Carlo E[eps - X0 | (1 - s) X0 + s eps near x]
    rng = np.random.default_rng(5)
    s, x = 0.6, 0.3
    x0 = np.where(rng.random(2_000_000) < 0.5, -1.0, 1.0)
    eps = rng.standard_normal(x0.size)
    h = (1 - s) * x0 + s * eps
    near = np.abs(h - x) < 0.01
    assert two_point_field(np.array([[x]]), s)[0, 0] == pytest.approx(np.mean((eps - x0)[near]), abs=0.03)
