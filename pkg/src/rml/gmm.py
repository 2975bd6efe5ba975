"""Gaussian mixture targets and exact reverse conditionals.

For the symmetric 1-D mixture X_0 | s ~ N(s, sigma^2), s = +-1 equally
likely, and the three matched-marginal forward schemes, X_{t-1} | X_t = x is
a two-component Gaussian mixture

    sum_s w_s(x) N(a x + b_s, tau^2)

with closed-form slope ``a``, variance ``tau^2`` and offsets ``b_s``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from rml.bridge import SCHEMES, MatchedMarginalBridge
from rml.errors import ConfigurationError
from rml.scoring import as_batch


@dataclass(frozen=True)
class GmmSpec:
    """Equal-variance isotropic Gaussian mixture; ``sigma`` is the component std."""

    means: np.ndarray
    weights: np.ndarray
    sigma: float

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        if means.shape[0] == 1 and np.ndim(self.means) == 1:
            means = means.T  # 1-D list of scalar means
        weights = np.asarray(self.weights, dtype=float)
        if weights.shape != (means.shape[0],):
            raise ConfigurationError("one weight per component required")
        if np.any(weights <= 0) or not np.isclose(weights.sum(), 1.0):
            raise ConfigurationError("weights must be positive and sum to 1")
        if self.sigma <= 0:
            raise ConfigurationError(f"sigma must be positive, got {self.sigma}")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def symmetric(cls, sigma: float) -> GmmSpec:
        return cls(means=[-1.0, 1.0], weights=[0.5, 0.5], sigma=sigma)

    @classmethod
    def three_cluster(cls, sigma: float = 0.1) -> GmmSpec:
        return cls(
            means=[[0.0, 0.0], [5.0, 5.0], [6.0, -1.0]],
            weights=[1 / 3, 1 / 3, 1 / 3],
            sigma=sigma,
        )

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[comp] + self.sigma * rng.standard_normal((n, self.dim))

    def log_density(self, x) -> np.ndarray:
        x = as_batch(x)
        if x.shape[1] != self.dim:
            raise ConfigurationError(f"points have dim {x.shape[1]}, mixture has {self.dim}")
        sq = ((x[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=2)
        log_norm = -0.5 * self.dim * np.log(2 * np.pi * self.sigma**2)
        return logsumexp(np.log(self.weights) + log_norm - 0.5 * sq / self.sigma**2, axis=1)

    def density(self, x) -> np.ndarray:
        return np.exp(self.log_density(x))

    def peak_density(self) -> float:
        return float(self.density(self.means).max())

    def low_density_fraction(self, samples, frac: float = 0.01) -> float:
        """Share of samples where the mixture density is below ``frac`` x peak."""
        dens = self.density(samples)
        return float(np.mean(dens < frac * self.peak_density()))


def density(spec: GmmSpec, x) -> np.ndarray:
    return spec.density(x)


@dataclass(frozen=True)
class ReverseConditionalParams:
    scheme: str
    t: int
    T: int
    sigma: float
    a: float
    tau2: float
    b: float  # offset for s = +1; s = -1 uses -b

    def offset(self, s) -> np.ndarray:
        return np.asarray(s) * self.b

    def weight(self, x, s=1) -> np.ndarray:
        """w_s(x): posterior probability of component s given X_t = x."""
        c = 1.0 - self.t / self.T
        v = c * c * self.sigma**2 + (self.t / self.T) ** 2
        return expit(2.0 * np.asarray(s) * np.asarray(x, dtype=float) * c / v)

    def mean(self, x, s) -> np.ndarray:
        return self.a * np.asarray(x, dtype=float) + self.offset(s)


def reverse_params(scheme: str, sigma: float, t: int, T: int) -> ReverseConditionalParams:
    """Exact parameters of X_{t-1} | X_t for the symmetric 1-D mixture."""
    if scheme not in SCHEMES:
        raise ConfigurationError(f"unknown scheme {scheme!r}")
    if not 1 <= t <= T:
        raise ConfigurationError(f"reverse conditional defined for 1 <= t <= T, got t={t}, T={T}")
    if sigma <= 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    c_prev = 1.0 - (t - 1) / T
    c = 1.0 - t / T
    s2 = sigma * sigma
    var_t = c * c * s2 + (t / T) ** 2
    var_prev = c_prev * c_prev * s2 + ((t - 1) / T) ** 2
    noise_cov = {
        "flow-matching": (t - 1) * t / T**2,
        "diffusion": (t - 1) ** 2 / T**2,
        "x-process": 0.0,
    }[scheme]
    cov = c_prev * c * s2 + noise_cov
    a = cov / var_t
    tau2 = max(var_prev - cov * cov / var_t, 0.0)
    b = c_prev - a * c
    return ReverseConditionalParams(scheme, t, T, sigma, a, tau2, b)


def sigma_zero_limit(scheme: str, t: int, T: int) -> tuple[float, float]:
    """(a, tau^2) as sigma -> 0."""
    if scheme == "flow-matching":
        return (t - 1) / t, 0.0
    if scheme == "diffusion":
        return (t - 1) ** 2 / t**2, (2 * t - 1) / t**2 * (t - 1) ** 2 / T**2
    if scheme == "x-process":
        return 0.0, (t - 1) ** 2 / T**2
    raise ConfigurationError(f"unknown scheme {scheme!r}")


def sample_reverse(params: ReverseConditionalParams, x_t, rng: np.random.Generator) -> np.ndarray:
    """Draw X_{t-1} given X_t = x_t (elementwise over any array shape)."""
    x_t = np.asarray(x_t, dtype=float)
    w_plus = params.weight(x_t, 1)
    s = np.where(rng.random(x_t.shape) < w_plus, 1.0, -1.0)
    out = params.mean(x_t, s)
    if params.tau2 > 0:
        out = out + np.sqrt(params.tau2) * rng.standard_normal(x_t.shape)
    return out


class GmmReverseOracle:
    """Exact reverse kernels of a matched-marginal bridge on the +-1 mixture.

    Acts coordinatewise, so a d-dimensional bridge targets the product of d
    independent copies of the 1-D mixture.
    """

    def __init__(self, scheme: str, sigma: float, T: int, dim: int = 1):
        self.bridge = MatchedMarginalBridge(scheme, T, dim)
        self.sigma = sigma
        self.params = {t: reverse_params(scheme, sigma, t, T) for t in range(1, T + 1)}

    @property
    def spec(self) -> GmmSpec:
        return GmmSpec.symmetric(self.sigma)

    def step(self, t: int, x_t, rng: np.random.Generator, y=None) -> np.ndarray:
        return sample_reverse(self.params[t], as_batch(x_t), rng)


def reverse_conditional_density(params: ReverseConditionalParams, x: float, y) -> np.ndarray:
    """Density of X_{t-1} at ``y`` given X_t = x."""
    if params.tau2 <= 0:
        raise ConfigurationError("reverse conditional is degenerate (tau^2 = 0); no density")
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    for s in (1.0, -1.0):
        mu = params.mean(x, s)
        w = params.weight(x, s)
        out = out + w * np.exp(-0.5 * (y - mu) ** 2 / params.tau2) / np.sqrt(2 * np.pi * params.tau2)
    return out
