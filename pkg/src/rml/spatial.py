"""Synthetic spatial fields and the pooling-bridge step-count study."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from rml.bridge import PoolingBridge
from rml.engine import GeneratorStack, TrainConfig, reverse_markov_sample, train
from rml.errors import ConfigurationError
from rml.metrics import marginal_distances, rank_histogram, rank_histogram_tv
from rml.scoring import as_batch, energy_distance

METRICS = (
    "joint_energy",
    "mean_marginal_energy",
    "max_marginal_energy",
    "mean_marginal_w2",
    "max_marginal_w2",
    "rank_tv",
)


@dataclass(frozen=True)
class SpatialFieldSpec:
    """Smoothed white noise on a periodic ``side x side`` grid plus a random large-scale wave.

    ``smoothing`` is the std (in cells) of the Gaussian smoothing kernel;
    0 leaves the noise white. The smoothed part has unit pointwise variance.
    """

    side: int = 16
    smoothing: float = 1.5
    large_scale: float = 1.0
    n_train: int = 2000
    n_eval: int = 1000

    def __post_init__(self):
        if self.side < 2 or self.side & (self.side - 1):
            raise ConfigurationError(f"grid side must be a power of 2, got {self.side}")
        if self.smoothing < 0 or self.large_scale < 0:
            raise ConfigurationError("smoothing and large_scale must be nonnegative")

    @property
    def dim(self) -> int:
        return self.side * self.side


def _smooth(noise: np.ndarray, width: float) -> np.ndarray:
    if width == 0:
        return noise
    out = gaussian_filter(noise, sigma=(0, width, width), mode="wrap")
    # rescale to unit variance using the kernel's own energy
    impulse = np.zeros(noise.shape[1:])
    impulse[0, 0] = 1.0
    k = gaussian_filter(impulse, sigma=width, mode="wrap")
    return out / np.sqrt(np.sum(k * k))


def synth_fields(spec: SpatialFieldSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """n flattened fields, one per row."""
    r = spec.side
    noise = rng.standard_normal((n, r, r))
    fields = _smooth(noise, spec.smoothing)
    if spec.large_scale:
        grid = 2.0 * np.pi * np.arange(r) / r
        wave_x = np.cos(grid)[None, :] * np.ones((r, 1))
        wave_y = np.sin(grid)[:, None] * np.ones((1, r))
        amp = rng.standard_normal((n, 2)) * spec.large_scale
        fields = fields + amp[:, 0, None, None] * wave_x + amp[:, 1, None, None] * wave_y
    return fields.reshape(n, r * r)


def lag1_autocorrelation(fields, side: int) -> float:
    """Correlation between horizontally adjacent cells, pooled over the batch."""
    f = as_batch(fields).reshape(-1, side, side)
    a = f[:, :, :-1].ravel()
    b = f[:, :, 1:].ravel()
    return float(np.corrcoef(a, b)[0, 1])


def metric_panel(truth, generated, rng: np.random.Generator, ensemble: int = 19) -> dict[str, float]:
    """The six distributional metrics between held-out truth and generated fields.

    Rank histogram: each truth field is ranked cell by cell within ``ensemble``
    generated fields drawn without replacement; tallies pool over cells.
    """
    truth = as_batch(truth)
    generated = as_batch(generated)
    if generated.shape[0] < ensemble:
        raise ConfigurationError(f"need at least {ensemble} generated fields, got {generated.shape[0]}")
    marg = marginal_distances(truth, generated)
    members = np.stack(
        [rng.choice(generated.shape[0], size=ensemble, replace=False) for _ in range(truth.shape[0])]
    )
    ens = generated[members]  # (n_truth, ensemble, dim)
    hist = rank_histogram(truth.ravel(), ens.transpose(0, 2, 1).reshape(-1, ensemble), rng)
    return {
        "joint_energy": energy_distance(truth, generated),
        "mean_marginal_energy": float(marg["energy"].mean()),
        "max_marginal_energy": float(marg["energy"].max()),
        "mean_marginal_w2": float(marg["wasserstein"].mean()),
        "max_marginal_w2": float(marg["wasserstein"].max()),
        "rank_tv": rank_histogram_tv(hist),
    }


@dataclass
class SpatialRow:
    metric: str
    kernel: int
    steps: int
    value: float
    runtime_seconds: float


@dataclass
class SpatialReport:
    rows: list[SpatialRow]
    baseline: dict[str, float] = field(default_factory=dict)
    traces: dict = field(default_factory=dict)
    samples: dict = field(default_factory=dict)

    columns = ("metric", "kernel", "steps", "value", "runtime_seconds")

    def records(self) -> list[dict]:
        return [{c: getattr(r, c) for c in self.columns} for r in self.rows]

    def value(self, metric: str, kernel: int) -> float:
        for r in self.rows:
            if r.metric == metric and r.kernel == kernel:
                return r.value
        raise KeyError((metric, kernel))

    def steps(self, kernel: int) -> int:
        return next(r.steps for r in self.rows if r.kernel == kernel)


def pooling_study(
    spec: SpatialFieldSpec,
    kernels,
    cfg: TrainConfig,
    rng: np.random.Generator | int,
    hidden=(128, 128, 128),
    n_generate: int | None = None,
    iterations_per_step: int | None = None,
    threads: int = 1,
) -> SpatialReport:
    """Train one pooling-bridge stack per kernel size and score its samples.

    With ``iterations_per_step`` each stack trains for that many iterations
    times its step count, so every generator sees the same expected number
    of updates whatever T is; otherwise all stacks share ``cfg.iterations``.
    Rows with kernel 0 hold the held-out truth-vs-truth baseline.
    """
    for k in kernels:
        PoolingBridge(spec.side, int(k))  # validates divisibility up front
    seq = np.random.SeedSequence(rng if isinstance(rng, int) else int(rng.integers(2**63)))
    data_seq, base_seq, *run_seqs = seq.spawn(2 + len(kernels))
    drng = np.random.default_rng(data_seq)
    train_x = synth_fields(spec, spec.n_train, drng)
    eval_x = synth_fields(spec, spec.n_eval, drng)
    n_generate = n_generate or spec.n_eval

    brng = np.random.default_rng(base_seq)
    baseline = metric_panel(eval_x, synth_fields(spec, n_generate, brng), brng)
    rows = [SpatialRow(m, 0, 0, baseline[m], 0.0) for m in METRICS]

    def run(args):
        k, s = args
        g = np.random.default_rng(s)
        start = time.perf_counter()
        bridge = PoolingBridge(spec.side, int(k))
        stack = GeneratorStack(bridge, hidden=hidden, rng=g)
        run_cfg = cfg
        if iterations_per_step:
            run_cfg = replace(cfg, iterations=int(iterations_per_step) * bridge.T)
        result = train(stack, train_x, run_cfg, g)
        generated = reverse_markov_sample(stack, n_generate, g)
        runtime = time.perf_counter() - start
        return k, bridge.T, metric_panel(eval_x, generated, g), runtime, result, generated

    jobs = list(zip(kernels, run_seqs))
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(run, jobs))
    else:
        outputs = [run(j) for j in jobs]
    traces, samples = {}, {}
    for k, T, panel, runtime, result, generated in outputs:
        rows.extend(SpatialRow(m, int(k), T, panel[m], runtime) for m in METRICS)
        traces[int(k)] = result
        samples[int(k)] = generated
    return SpatialReport(rows, baseline, traces, samples)
