import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rml.bridge import SCHEMES
from rml.engine import reverse_markov_sample
from rml.errors import ConfigurationError
from rml.experiments import closed_form_check
from rml.gmm import (
    GmmReverseOracle,
    GmmSpec,
    density,
    reverse_conditional_density,
    reverse_params,
    sample_reverse,
    sigma_zero_limit,
)
from rml.scoring import energy_distance

# x-process slope at sigma = 0.25, t = 2, T = 5: (0.8 * 0.6 * 0.0625) / (0.36 * 0.0625 + 0.16)
A_XPROCESS = (0.8 * 0.6 * 0.0625) / (0.36 * 0.0625 + 0.16)


def test_x_process_slope_value():
    assert reverse_params("x-process", 0.25, 2, 5).a == pytest.approx(A_XPROCESS, rel=1e-12)
    assert A_XPROCESS == pytest.approx(0.164384, abs=1e-6)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_weights_half_at_zero(scheme):
    p = reverse_params(scheme, 0.3, 2, 4)
    assert p.weight(0.0, 1) == 0.5 and p.weight(0.0, -1) == 0.5


@settings(max_examples=50, deadline=None)
@given(
    x=st.floats(-10, 10),
    scheme=st.sampled_from(SCHEMES),
    sigma=st.floats(0.01, 2.0),
    T=st.integers(1, 12),
    data=st.data(),
)
def test_weights_normalised(x, scheme, sigma, T, data):
    t = data.draw(st.integers(1, T))
    p = reverse_params(scheme, sigma, t, T)
    assert p.weight(x, 1) + p.weight(x, -1) == pytest.approx(1.0, abs=1e-15)
    assert p.tau2 >= 0


# limits as displayed for sigma -> 0, written out independently of the library
DISPLAYED_LIMITS = {
    "flow-matching": lambda t, T: ((t - 1) / t, 0.0),
    "diffusion": lambda t, T: ((t - 1) ** 2 / t**2, (2 * t - 1) / t**2 * (t - 1) ** 2 / T**2),
    "x-process": lambda t, T: (0.0, (t - 1) ** 2 / T**2),
}


@pytest.mark.parametrize("scheme", SCHEMES)
def test_sigma_zero_limits(scheme):
    a_lim, tau_lim = DISPLAYED_LIMITS[scheme](3, 5)
    assert sigma_zero_limit(scheme, 3, 5) == pytest.approx((a_lim, tau_lim), abs=1e-15)
    p = reverse_params(scheme, 1e-4, 3, 5)
    assert abs(p.a - a_lim) < 1e-3 and abs(p.tau2 - tau_lim) < 1e-3


@pytest.mark.parametrize("t", range(2, 6))
def test_smoothness_ordering(t):
    p = {s: reverse_params(s, 1e-2, t, 5) for s in SCHEMES}
    assert p["x-process"].a < p["diffusion"].a < p["flow-matching"].a
    assert p["x-process"].tau2 >= p["diffusion"].tau2


def test_reverse_params_errors():
    with pytest.raises(ConfigurationError):
        reverse_params("x-process", 0.25, 0, 5)
    with pytest.raises(ConfigurationError):
        reverse_params("x-process", 0.0, 1, 5)
    with pytest.raises(ConfigurationError):
        reverse_params("ode", 0.25, 1, 5)


def test_zero_variance_sample_is_deterministic_given_component():
    p = reverse_params("flow-matching", 1e-9, 3, 5)
    x = np.full(1000, 4.0)  # far right: component +1 almost surely
    out = sample_reverse(p, x, np.random.default_rng(0))
    assert np.allclose(out, p.a * 4.0 + p.b, atol=1e-6)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_monte_carlo_regression_matches_closed_form(scheme):
    for row in closed_form_check(scheme, 0.25, 5, 100_000, np.random.default_rng(1)):
        # 2% of the slope's natural unit sd(X_{t-1}) / sd(X_t); see the decisions ledger
        assert abs(row["a_mc"] - row["a"]) <= 0.02 * max(abs(row["a"]), row["slope_scale"])
        assert row["tau2_mc"] == pytest.approx(row["tau2"], rel=0.05)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_oracle_pipeline_reproduces_target(scheme):
    rng = np.random.default_rng(2)
    oracle = GmmReverseOracle(scheme, 0.25, 5)
    x = reverse_markov_sample(oracle, 10_000, rng)
    assert energy_distance(x, oracle.spec.sample(10_000, rng)) < 0.02


def test_oracle_reproduces_intermediate_marginals():
    rng = np.random.default_rng(3)
    oracle = GmmReverseOracle("x-process", 0.25, 4)
    path = reverse_markov_sample(oracle, 10_000, rng, return_path=True)
    forward = oracle.bridge.sample_path(oracle.spec.sample(10_000, rng), rng)
    for t in range(5):
        assert energy_distance(path[t], forward[t]) < 0.02


def test_density_peak_and_symmetry():
    spec = GmmSpec.three_cluster(0.1)
    peak = density(spec, spec.means[:1])[0]
    assert peak >= (1 / 3) / (2 * np.pi * 0.01)
    sym = GmmSpec.symmetric(0.3)
    x = np.linspace(-3, 3, 41)
    assert np.allclose(sym.density(x), sym.density(-x), rtol=1e-14)


def test_density_integrates_to_one():
    spec = GmmSpec.three_cluster(0.1)
    g = np.linspace(-1.5, 7.5, 901)
    xx, yy = np.meshgrid(g, np.linspace(-2.5, 6.5, 901))
    vals = spec.density(np.column_stack([xx.ravel(), yy.ravel()]))
    assert vals.sum() * (g[1] - g[0]) ** 2 == pytest.approx(1.0, abs=1e-3)
    one_d = GmmSpec.symmetric(0.25)
    h = np.linspace(-5, 5, 10_001)
    assert one_d.density(h).sum() * (h[1] - h[0]) == pytest.approx(1.0, abs=1e-3)


def test_low_density_fraction_of_truth_is_small():
    spec = GmmSpec.three_cluster(0.1)
    x = spec.sample(20_000, np.random.default_rng(4))
    # 2-D Gaussian: P(density < 1% of peak) = exp(-log(100)) = 0.01 per component
    assert spec.low_density_fraction(x) == pytest.approx(0.01, abs=0.003)
    assert spec.low_density_fraction(np.array([[2.5, 2.5]])) == 1.0


def test_gmm_spec_validation():
    with pytest.raises(ConfigurationError):
        GmmSpec(means=[0.0, 1.0], weights=[0.2, 0.2], sigma=1.0)
    with pytest.raises(ConfigurationError):
        GmmSpec(means=[0.0, 1.0], weights=[0.5, 0.5], sigma=0.0)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_reverse_conditional_density_integrates_to_one(scheme):
    p = reverse_params(scheme, 0.1, 5, 10)
    y = np.linspace(-6, 6, 24_001)
    assert reverse_conditional_density(p, 0.5, y).sum() * (y[1] - y[0]) == pytest.approx(1.0, abs=1e-6)


def test_reverse_conditional_density_degenerate():
    p = reverse_params("x-process", 0.25, 5, 5)
    assert p.tau2 > 0
    with pytest.raises(ConfigurationError):
        from dataclasses import replace

        reverse_conditional_density(replace(p, tau2=0.0), 0.0, [0.0])
