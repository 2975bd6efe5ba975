"""Energy score, energy distance and the training losses built on them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import ndtr

from rml.errors import ConfigurationError, InsufficientSamplesError
from rml.nn import MlpGenerator

_CHUNK = 2048


@dataclass(frozen=True)
class EnergyScoreConfig:
    beta: float = 1.0
    samples: int = 1000

    def __post_init__(self):
        if not 0.0 < self.beta < 2.0:
            raise ConfigurationError(f"energy score exponent must lie in (0, 2), got {self.beta}")


def as_batch(x) -> np.ndarray:
    """Coerce to an ``n x d`` float array; 1-D input is read as n scalars."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x[:, None]
    if x.ndim != 2:
        raise ConfigurationError(f"expected a batch of vectors, got shape {x.shape}")
    return x


def _canonical(x: np.ndarray) -> np.ndarray:
    # sorted rows, so that sums only depend on the multiset
    if x.shape[1] == 1:
        return np.sort(x, axis=0)
    order = np.lexsort(x.T[::-1])
    return x[order]


def _cross_sum_1d(a: np.ndarray, b: np.ndarray) -> float:
    """sum_{i,j} |a_i - b_j| in O((m + n) log n)."""
    bs = np.sort(b)
    prefix = np.concatenate(([0.0], np.cumsum(bs)))
    k = np.searchsorted(bs, a)
    total = prefix[-1]
    below = a * k - prefix[k]
    above = (total - prefix[k]) - a * (bs.size - k)
    return float(np.sum(below + above))


def _cross_sum(a: np.ndarray, b: np.ndarray, beta: float = 1.0) -> float:
    """sum_{i,j} ||a_i - b_j||^beta over all index pairs."""
    if a.shape[1] == 1 and beta == 1.0:
        return _cross_sum_1d(a[:, 0], b[:, 0])
    total = 0.0
    for start in range(0, a.shape[0], _CHUNK):
        dist = cdist(a[start : start + _CHUNK], b)
        if beta != 1.0:
            dist = dist**beta
        total += float(dist.sum())
    return total


def _ordered(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # fixed argument order keeps D(a, b) and D(b, a) bitwise equal
    if (a.shape[0], a.tobytes()) <= (b.shape[0], b.tobytes()):
        return a, b
    return b, a


def energy_score(samples, x, beta: float = 1.0) -> float:
    """Monte Carlo energy score S(p, x) from draws of p.

    Uses the unbiased i != j average for the pairwise term.
    """
    s = as_batch(samples)
    m = s.shape[0]
    if m < 2:
        raise InsufficientSamplesError(f"energy score needs at least 2 samples, got {m}")
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if x.shape[1] != s.shape[1]:
        raise ConfigurationError(f"observation has dim {x.shape[1]}, samples have {s.shape[1]}")
    s = _canonical(s)
    within = _cross_sum(s, s, beta)
    to_obs = _cross_sum(s, x, beta)
    return within / (2.0 * m * (m - 1)) - to_obs / m


def energy_distance(a, b, beta: float = 1.0, unbiased: bool = False) -> float:
    """Energy distance between the laws behind two samples.

    The default is the distance between the two empirical measures
    (all index pairs, diagonal included). It is nonnegative, symmetric and
    exactly zero on identical multisets. ``unbiased=True`` drops the
    within-sample diagonal instead, which removes the O(1/n) bias but can go
    slightly negative.
    """
    a = as_batch(a)
    b = as_batch(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise InsufficientSamplesError("energy distance needs non-empty samples")
    if a.shape[1] != b.shape[1]:
        raise ConfigurationError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    a, b = _ordered(_canonical(a), _canonical(b))
    m, n = a.shape[0], b.shape[0]
    cross = _cross_sum(a, b, beta)
    wa = _cross_sum(a, a, beta)
    wb = _cross_sum(b, b, beta)
    if unbiased:
        if m < 2 or n < 2:
            raise InsufficientSamplesError("unbiased energy distance needs 2+ samples per side")
        return 2.0 * cross / (m * n) - (wa / (m * (m - 1.0)) + wb / (n * (n - 1.0)))
    return 2.0 * cross / (m * n) - (wa / (m * m) + wb / (n * n))


def folded_normal_mean(mu, sigma=1.0):
    """E|N(mu, sigma^2)|."""
    mu = np.asarray(mu, dtype=float)
    z = mu / sigma
    return sigma * np.sqrt(2.0 / np.pi) * np.exp(-0.5 * z * z) + mu * (1.0 - 2.0 * ndtr(-z))


def gaussian_energy_distance_1d(m1, m2, sd: float = 1.0):
    """Closed-form energy distance between N(m1, sd^2) and N(m2, sd^2)."""
    s = np.sqrt(2.0) * sd
    return 2.0 * folded_normal_mean(np.asarray(m1) - np.asarray(m2), s) - 2.0 * folded_normal_mean(0.0, s)


def energy_loss(x: np.ndarray, g1: np.ndarray, g2: np.ndarray):
    """Per-batch energy loss and its adjoints w.r.t. the two generator draws.

    loss = mean_i ||x_i - g1_i|| - 0.5 ||g1_i - g2_i||. A zero-length
    residual gets subgradient 0.
    """
    m = x.shape[0]
    r = g1 - x
    u = g1 - g2
    rn = np.sqrt(np.sum(r * r, axis=1))
    un = np.sqrt(np.sum(u * u, axis=1))
    loss = float(np.mean(rn - 0.5 * un))
    rdir = np.divide(r, rn[:, None], out=np.zeros_like(r), where=rn[:, None] > 0)
    udir = np.divide(u, un[:, None], out=np.zeros_like(u), where=un[:, None] > 0)
    adj1 = (rdir - 0.5 * udir) / m
    adj2 = (0.5 * udir) / m
    return loss, adj1, adj2


def engression_loss(gen: MlpGenerator, x, cond, eps, eps2):
    """Energy loss of ``gen`` on targets ``x``; returns (loss, parameter grads).

    ``cond`` holds the non-noise inputs (x_t, covariates, time), ``eps`` and
    ``eps2`` two independent standard Gaussian noise batches.
    """
    x = as_batch(x)
    m = x.shape[0]
    cond = np.zeros((m, 0)) if cond is None else np.asarray(cond, dtype=float).reshape(m, -1)
    eps = np.asarray(eps, dtype=float).reshape(m, -1)
    eps2 = np.asarray(eps2, dtype=float).reshape(m, -1)
    if eps.shape[1] != gen.split.noise_dim or eps2.shape != eps.shape:
        raise ConfigurationError(
            f"noise dimension {eps.shape[1]} does not match generator noise dim {gen.split.noise_dim}"
        )
    inp = np.concatenate(
        [np.concatenate([cond, eps], axis=1), np.concatenate([cond, eps2], axis=1)], axis=0
    )
    out = gen.forward(inp)
    loss, adj1, adj2 = energy_loss(x, out[:m], out[m:])
    grads = gen.backward(np.concatenate([adj1, adj2], axis=0))
    return loss, grads


def fm_regression_loss(field: MlpGenerator, x0, eps, s, y=None):
    """Flow-matching squared error along h = (1 - s) x0 + s eps.

    Returns (loss, parameter grads); the regression target is eps - x0.
    """
    x0 = as_batch(x0)
    eps = as_batch(eps)
    n = x0.shape[0]
    s = np.asarray(s, dtype=float).reshape(n, 1)
    h = (1.0 - s) * x0 + s * eps
    parts = [h] if y is None else [h, as_batch(y)]
    parts.append(s)
    out = field.forward(np.concatenate(parts, axis=1))
    diff = out - (eps - x0)
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    grads = field.backward(2.0 * diff / n)
    return loss, grads
