"""Distributional evaluation: Wasserstein distances and rank histograms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rml.errors import ConfigurationError, InsufficientSamplesError
from rml.scoring import as_batch, energy_distance


def wasserstein2_1d(a, b) -> float:
    """W2 between two 1-D empirical distributions via order statistics.

    Unequal sizes: the larger sample is read off at the coarser sample's
    quantile levels by linear interpolation.
    """
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise InsufficientSamplesError("Wasserstein distance needs non-empty samples")
    if a.size != b.size:
        if a.size > b.size:
            a, b = b, a
        levels = (np.arange(a.size) + 0.5) / a.size
        b = np.quantile(b, levels)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def sliced_wasserstein(a, b, n_projections: int = 64, rng: np.random.Generator | None = None) -> float:
    """RMS of 1-D W2 over random unit directions."""
    a = as_batch(a)
    b = as_batch(b)
    if a.shape[1] != b.shape[1]:
        raise ConfigurationError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    rng = rng if rng is not None else np.random.default_rng(0)
    dirs = rng.standard_normal((n_projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    sq = [wasserstein2_1d(a @ u, b @ u) ** 2 for u in dirs]
    return float(np.sqrt(np.mean(sq)))


@dataclass
class RankHistogram:
    counts: np.ndarray

    @property
    def ensemble_size(self) -> int:
        return self.counts.size - 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def frequencies(self) -> np.ndarray:
        return self.counts / self.counts.sum()


def rank_histogram(truths, ensembles, rng: np.random.Generator | None = None) -> RankHistogram:
    """Tally the rank of each truth within its ensemble.

    rank = number of members strictly below the truth, plus a uniform draw
    over the tied positions.
    """
    truths = np.asarray(truths, dtype=float).ravel()
    ens = np.asarray(ensembles, dtype=float)
    if truths.size == 0:
        raise InsufficientSamplesError("rank histogram needs at least one tally")
    ens = ens.reshape(truths.size, -1)
    m = ens.shape[1]
    if m == 0:
        raise InsufficientSamplesError("ensembles are empty")
    rng = rng if rng is not None else np.random.default_rng(0)
    below = (ens < truths[:, None]).sum(axis=1)
    ties = (ens == truths[:, None]).sum(axis=1)
    ranks = below + np.floor(rng.random(truths.size) * (ties + 1)).astype(int)
    return RankHistogram(np.bincount(ranks, minlength=m + 1))


def rank_histogram_tv(h: RankHistogram) -> float:
    """Total-variation distance between the rank histogram and uniform."""
    if h.total <= 0:
        raise InsufficientSamplesError("empty rank histogram")
    p = h.frequencies()
    return float(0.5 * np.abs(p - 1.0 / p.size).sum())


def marginal_distances(truth, generated) -> dict[str, np.ndarray]:
    """Per-coordinate energy and W2 distances between two samples."""
    truth = as_batch(truth)
    generated = as_batch(generated)
    if truth.shape[1] != generated.shape[1]:
        raise ConfigurationError("dimension mismatch")
    ed = np.array([energy_distance(truth[:, j], generated[:, j]) for j in range(truth.shape[1])])
    w2 = np.array([wasserstein2_1d(truth[:, j], generated[:, j]) for j in range(truth.shape[1])])
    return {"energy": ed, "wasserstein": w2}
