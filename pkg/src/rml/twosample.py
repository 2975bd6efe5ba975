"""Two-sample tests on SEM data: plain energy distance vs the stepwise statistic.

The stepwise statistic walks the dimension-drop bridge: at the step that
restores coordinate k it compares the fitted Gaussian conditionals
N(a_k'x_{1:k-1}, 1) and N(b_k'x_{1:k-1}, 1) of the two samples, averaging
the closed-form 1-D energy distance over the pooled conditioning points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from rml.errors import ConfigurationError, InsufficientSamplesError
from rml.scoring import as_batch, energy_distance, gaussian_energy_distance_1d
from rml.sem import SemSpec, estimate_mle, free_entries, sem_sample

FAMILIES = ("plain", "rml")


@dataclass(frozen=True)
class TestSpec:
    d: int = 5
    n: int = 200
    null_sims: int = 500
    level: float = 0.05
    separations: tuple[float, ...] = (0.0, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0)
    replications: int = 200

    # not a pytest class
    __test__ = False

    def __post_init__(self):
        if not 0 < self.level < 1:
            raise ConfigurationError(f"level must lie in (0, 1), got {self.level}")
        if self.null_sims < 100:
            raise ConfigurationError(f"null_sims must be >= 100, got {self.null_sims}")
        if self.n <= self.d:
            raise ConfigurationError(f"need n > d, got n={self.n}, d={self.d}")
        if any(s < 0 for s in self.separations):
            raise ConfigurationError("separations must be nonnegative")


@dataclass(frozen=True)
class TestResult:
    statistic: float
    critical_value: float
    family: str

    __test__ = False

    @property
    def reject(self) -> bool:
        return self.statistic > self.critical_value


def plain_statistic(a, b) -> float:
    return energy_distance(a, b)


def rml_statistic(a, b) -> float:
    """Mean over bridge steps of the expected conditional energy distance."""
    a = as_batch(a)
    b = as_batch(b)
    if a.shape[1] != b.shape[1]:
        raise ConfigurationError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    d = a.shape[1]
    if min(a.shape[0], b.shape[0]) <= d:
        raise InsufficientSamplesError(f"per-step regression needs n > d, got {a.shape[0]}, {b.shape[0]}")
    Ba = estimate_mle(a)
    Bb = estimate_mle(b)
    pooled = np.concatenate([a, b], axis=0)
    total = 0.0
    # the first coordinate has no parents: both fitted conditionals are N(0, 1)
    for k in range(1, d):
        z = pooled[:, :k]
        total += float(np.mean(gaussian_energy_distance_1d(z @ Ba[k, :k], z @ Bb[k, :k])))
    return total / d


STATISTICS = {"plain": plain_statistic, "rml": rml_statistic}


def nearest_rank_quantile(values, q: float) -> float:
    """Smallest value with at least a fraction q of the sample at or below it."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise InsufficientSamplesError("quantile of an empty sample")
    rank = max(1, math.ceil(q * v.size - 1e-9))
    return float(v[rank - 1])


def _family(name: str):
    if name not in STATISTICS:
        raise ConfigurationError(f"unknown statistic family {name!r}; choose from {FAMILIES}")
    return STATISTICS[name]


def null_statistics(spec: TestSpec, sem: SemSpec, families, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Statistics on datasets drawn with A = B; one shared dataset pair per simulation."""
    out = {f: np.empty(spec.null_sims) for f in families}
    for i in range(spec.null_sims):
        a = sem_sample(sem, spec.n, rng)
        b = sem_sample(sem, spec.n, rng)
        for f in families:
            out[f][i] = _family(f)(a, b)
    return out


def calibrate(spec: TestSpec, family: str, rng: np.random.Generator, sem: SemSpec | None = None) -> float:
    """Critical value: (1 - level) nearest-rank quantile of null statistics."""
    sem = sem if sem is not None else SemSpec.random(spec.d, rng)
    stats = null_statistics(spec, sem, [family], rng)[family]
    return nearest_rank_quantile(stats, 1.0 - spec.level)


def perturbed(sem: SemSpec, separation: float, rng: np.random.Generator | None = None, direction=None) -> SemSpec:
    """SEM whose adjacency differs from ``sem`` by a direction of given Frobenius norm.

    The direction is drawn uniformly on the sphere unless supplied.
    """
    d = sem.d
    idx = free_entries(d)
    if direction is None:
        direction = rng.standard_normal(idx[0].size)
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    B = sem.B.copy()
    B[idx] += separation * direction
    return SemSpec(B)


def _from_noise(spec: SemSpec, eps: np.ndarray) -> np.ndarray:
    return solve_triangular(np.eye(spec.d) - spec.B, eps.T, lower=True, unit_diagonal=True).T


@dataclass
class PowerRow:
    separation: float
    family: str
    power: float
    n: int
    d: int
    replications: int
    critical_value: float


@dataclass
class PowerReport:
    rows: list[PowerRow]
    null: dict[str, np.ndarray] = field(default_factory=dict)

    columns = ("separation", "family", "power", "n", "d", "replications", "critical_value")

    def records(self) -> list[dict]:
        return [{c: getattr(r, c) for c in self.columns} for r in self.rows]

    def power(self, family: str) -> np.ndarray:
        return np.array([r.power for r in self.rows if r.family == family])

    def separations(self) -> np.ndarray:
        fam = self.rows[0].family
        return np.array([r.separation for r in self.rows if r.family == fam])


def power_study(
    spec: TestSpec,
    rng: np.random.Generator | int,
    families=FAMILIES,
    sem: SemSpec | None = None,
) -> PowerReport:
    """Rejection rates over the separation grid, with A held fixed.

    Each replication draws a fresh perturbation direction and fresh data, so
    power is averaged over directions of the given norm. The same draws are
    reused across separations, which keeps the power curves smooth.
    """
    seq = np.random.SeedSequence(rng if isinstance(rng, int) else int(rng.integers(2**63)))
    base_seq, null_seq, rep_seq = seq.spawn(3)
    sem = sem if sem is not None else SemSpec.random(spec.d, np.random.default_rng(base_seq))
    null = null_statistics(spec, sem, families, np.random.default_rng(null_seq))
    crit = {f: nearest_rank_quantile(null[f], 1.0 - spec.level) for f in families}
    rejects = {(s, f): 0 for s in spec.separations for f in families}
    # common random numbers across the grid: one direction and one noise draw
    # per replication, only the separation varies
    for child in rep_seq.spawn(spec.replications):
        g = np.random.default_rng(child)
        direction = g.standard_normal(spec.d * (spec.d - 1) // 2)
        a = sem_sample(sem, spec.n, g)
        eps_b = g.standard_normal((spec.n, spec.d))
        for sep in spec.separations:
            b = _from_noise(perturbed(sem, sep, direction=direction), eps_b)
            for f in families:
                rejects[(sep, f)] += TestResult(_family(f)(a, b), crit[f], f).reject
    rows = [
        PowerRow(float(s), f, rejects[(s, f)] / spec.replications, spec.n, spec.d, spec.replications, crit[f])
        for s in spec.separations
        for f in families
    ]
    return PowerReport(rows, null)
