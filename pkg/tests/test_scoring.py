import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rml.errors import ConfigurationError, InsufficientSamplesError
from rml.nn import InputSplit, MlpGenerator
from rml.scoring import (
    EnergyScoreConfig,
    energy_distance,
    energy_loss,
    energy_score,
    engression_loss,
    fm_regression_loss,
    folded_normal_mean,
    gaussian_energy_distance_1d,
)

# 2 E|N(1, 2)| - 2 E|N(0, 2)|, by numerical quadrature of the Gaussian density
ED_N0_N1 = 0.5418065793059581
# sqrt(2/pi) - 1/sqrt(pi): E|eps| - E|eps - eps'| / 2
ENGRESSION_IDENTITY = 0.23369497725510913


def test_score_config_exponent_bounds():
    EnergyScoreConfig(beta=1.5)
    for bad in (0.0, 2.0, -1.0):
        with pytest.raises(ConfigurationError):
            EnergyScoreConfig(beta=bad)


def test_energy_score_point_mass_at_observation():
    assert energy_score(np.full((10, 2), 3.0), np.array([3.0, 3.0])) == 0.0


def test_energy_score_point_mass_elsewhere():
    x0, x = np.array([1.0, 2.0]), np.array([4.0, 6.0])
    assert energy_score(np.tile(x0, (5, 1)), x) == pytest.approx(-5.0)


def test_energy_score_gaussian_closed_form():
    s = np.random.default_rng(0).standard_normal(100_000)
    assert energy_score(s, [0.0]) == pytest.approx(-ENGRESSION_IDENTITY, abs=0.01)


def test_energy_score_needs_two_samples():
    with pytest.raises(InsufficientSamplesError):
        energy_score(np.ones((1, 2)), np.ones(2))


def test_energy_distance_identical_batch_is_exact_zero():
    a = np.random.default_rng(1).standard_normal((300, 3))
    assert energy_distance(a, a) == 0.0
    assert energy_distance(a, a[::-1]) == 0.0


def test_energy_distance_point_masses():
    assert energy_distance(np.full(4, 1.0), np.full(6, -2.5)) == pytest.approx(7.0)


def test_energy_distance_gaussian_shift():
    rng = np.random.default_rng(2)
    a = rng.standard_normal(100_000)
    b = rng.standard_normal(100_000) + 1.0
    assert energy_distance(a, b) == pytest.approx(ED_N0_N1, abs=0.02)


def test_energy_distance_dimension_mismatch():
    with pytest.raises(ConfigurationError):
        energy_distance(np.ones((3, 2)), np.ones((3, 3)))
    with pytest.raises(InsufficientSamplesError):
        energy_distance(np.ones((0, 2)), np.ones((3, 2)))


def test_unbiased_variant_matches_pairwise_definition():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((40, 2)), rng.standard_normal((30, 2)) + 0.5
    d = lambda u, v: np.linalg.norm(u[:, None] - v[None], axis=2)
    within = lambda u: d(u, u).sum() / (len(u) * (len(u) - 1))
    expected = 2 * d(a, b).mean() - within(a) - within(b)
    assert energy_distance(a, b, unbiased=True) == pytest.approx(expected, rel=1e-12)
    v_stat = 2 * d(a, b).mean() - d(a, a).mean() - d(b, b).mean()
    assert energy_distance(a, b) == pytest.approx(v_stat, rel=1e-12)


def test_general_exponent_matches_pairwise_definition():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((20, 1)), rng.standard_normal((25, 1))
    d = lambda u, v: np.abs(u - v.T) ** 1.5
    expected = 2 * d(a, b).mean() - d(a, a).mean() - d(b, b).mean()
    assert energy_distance(a, b, beta=1.5) == pytest.approx(expected, rel=1e-12)


batches = arrays(np.float64, st.tuples(st.integers(1, 12), st.just(2)), elements=st.floats(-50, 50))


@settings(max_examples=60, deadline=None)
@given(a=batches, b=batches)
def test_energy_distance_symmetric_and_nonnegative(a, b):
    assert energy_distance(a, b) == energy_distance(b, a)
    assert energy_distance(a, b) >= -1e-9


@settings(max_examples=60, deadline=None)
@given(a=batches, b=batches, c=st.tuples(st.floats(-100, 100), st.floats(-100, 100)))
def test_energy_distance_translation_invariant(a, b, c):
    shift = np.array(c)
    base = energy_distance(a, b)
    assert energy_distance(a + shift, b + shift) == pytest.approx(base, rel=1e-9, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(a=batches)
def test_energy_distance_zero_on_permuted_copy(a):
    assert energy_distance(a, a[np.random.default_rng(0).permutation(len(a))]) == 0.0


def test_strict_propriety_gap_monotone():
    rng = np.random.default_rng(5)
    obs = rng.standard_normal(400)
    base = rng.standard_normal(10_000)
    expected = [np.mean([energy_score(base + mu, [x]) for x in obs]) for mu in (0.0, 0.5, 1.0)]
    assert expected[0] > expected[1] > expected[2]


def identity_noise_generator():
    net = MlpGenerator((1, 1), split=InputSplit(0, 0, 0, 1))
    net.weights[0][:] = 1.0
    return net


def test_engression_loss_zero_for_deterministic_exact_generator():
    net = MlpGenerator((2, 1), split=InputSplit(1, 0, 0, 1))
    net.weights[0][:] = [[1.0], [0.0]]
    x = np.random.default_rng(6).standard_normal((50, 1))
    eps = np.random.default_rng(7).standard_normal((50, 1))
    loss, _ = engression_loss(net, x, x, eps, -eps)
    assert loss == 0.0


def test_engression_loss_constant_generator():
    net = MlpGenerator((1, 2), split=InputSplit(0, 0, 0, 1))
    net.biases[0][:] = [1.0, -1.0]
    x = np.array([[4.0, 3.0]])
    loss, _ = engression_loss(net, x, None, np.ones((1, 1)), np.zeros((1, 1)))
    assert loss == pytest.approx(5.0)


def test_engression_loss_identity_generator_monte_carlo():
    rng = np.random.default_rng(8)
    m = 100_000
    loss, _ = engression_loss(
        identity_noise_generator(), np.zeros((m, 1)), None, rng.standard_normal((m, 1)), rng.standard_normal((m, 1))
    )
    assert loss == pytest.approx(ENGRESSION_IDENTITY, abs=0.01)


def test_engression_loss_noise_dimension_checked():
    with pytest.raises(ConfigurationError):
        engression_loss(identity_noise_generator(), np.zeros((3, 1)), None, np.zeros((3, 2)), np.zeros((3, 2)))


@pytest.mark.parametrize("seed", [0, 1])
def test_engression_loss_gradient_matches_finite_differences(seed, fd, rel_err):
    rng = np.random.default_rng(seed)
    net = MlpGenerator((4, 16, 16, 2), rng=rng, split=InputSplit(2, 0, 0, 2))
    x = rng.standard_normal((9, 2))
    cond = rng.standard_normal((9, 2))
    eps, eps2 = rng.standard_normal((9, 2)), rng.standard_normal((9, 2))
    _, grads = engression_loss(net, x, cond, eps, eps2)
    numeric = fd(lambda: engression_loss(net, x, cond, eps, eps2)[0], net.params())
    assert rel_err(grads, numeric) < 1e-4


def test_energy_loss_zero_residual_has_zero_subgradient():
    x = np.zeros((2, 2))
    loss, adj1, adj2 = energy_loss(x, x.copy(), x.copy())
    assert loss == 0.0
    assert np.all(adj1 == 0) and np.all(adj2 == 0)


def test_fm_loss_zero_for_exact_field():
    # x0 = 0 and s = 1: h = eps and the target eps - x0 is the identity in h
    net = MlpGenerator((2, 1))
    net.weights[0][:] = [[1.0], [0.0]]
    eps = np.random.default_rng(9).standard_normal((20, 1))
    loss, _ = fm_regression_loss(net, np.zeros((20, 1)), eps, np.ones(20))
    assert loss == 0.0


def test_fm_loss_zero_field_unit_noise():
    net = MlpGenerator((3, 2))
    eps = np.tile([0.6, 0.8], (5, 1))
    loss, _ = fm_regression_loss(net, np.zeros((5, 2)), eps, np.linspace(0, 1, 5))
    assert loss == pytest.approx(1.0)


def test_fm_loss_gradient_matches_finite_differences(fd, rel_err):
    rng = np.random.default_rng(10)
    net = MlpGenerator((3, 16, 16, 2), rng=rng)
    x0, eps, s = rng.standard_normal((8, 2)), rng.standard_normal((8, 2)), rng.random(8)
    _, grads = fm_regression_loss(net, x0, eps, s)
    numeric = fd(lambda: fm_regression_loss(net, x0, eps, s)[0], net.params())
    assert rel_err(grads, numeric) < 1e-4


def test_folded_normal_mean_against_quadrature():
    from scipy.integrate import quad

    for mu, sd in ((0.0, 1.0), (1.3, 0.7), (-2.0, 2.0)):
        ref = quad(lambda z: abs(z) * np.exp(-0.5 * ((z - mu) / sd) ** 2) / (sd * np.sqrt(2 * np.pi)), -60, 60, points=[0])[0]
        assert folded_normal_mean(mu, sd) == pytest.approx(ref, rel=1e-9)


def test_gaussian_energy_distance_closed_form_constant():
    assert gaussian_energy_distance_1d(0.0, 1.0) == pytest.approx(ED_N0_N1, rel=1e-12)
    assert gaussian_energy_distance_1d(2.0, 2.0) == 0.0
