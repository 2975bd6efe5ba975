"""One runner per experiment tag, plus the oracle studies they build on.

Each runner takes a resolved :class:`~rml.config.ExperimentConfig` and
returns an :class:`ExperimentOutput`; writing files is left to the CLI.
Every random draw descends from ``SeedSequence(cfg.seed)``, so a run is a
pure function of its config.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from rml.bridge import SCHEMES, MatchedMarginalBridge
from rml.config import ExperimentConfig
from rml.engine import (
    GeneratorStack,
    TrainConfig,
    TrainResult,
    alternating_generate,
    flow_ode_generate,
    reverse_markov_sample,
    train,
    two_point_field,
)
from rml.errors import ConfigurationError
from rml.gmm import GmmReverseOracle, GmmSpec, reverse_conditional_density, reverse_params
from rml.metrics import wasserstein2_1d
from rml.scoring import energy_distance
from rml.sem import SemSpec, asymptotic_variance, efficiency_study
from rml.spatial import METRICS, SpatialFieldSpec, pooling_study
from rml.twosample import TestSpec, power_study
from rml import svg

SCATTER_POINTS = 3000
TRACE_COLUMNS = ("iteration", "t", "loss")


@dataclass
class ExperimentOutput:
    metrics_columns: tuple
    metrics: list
    samples_columns: tuple
    samples: list
    plots: dict[str, str] = field(default_factory=dict)
    tables: dict[str, tuple] = field(default_factory=dict)  # extra CSVs: name -> (columns, rows)
    metadata: dict = field(default_factory=dict)


def _seeds(cfg: ExperimentConfig, k: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(cfg.seed).spawn(k)


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.section("train")
    return TrainConfig(
        iterations=t["iterations"],
        batch_size=t["batch_size"],
        learning_rate=t["learning_rate"],
        schedule=t["schedule"],
        seed=cfg.seed,
    )


def _trace_rows(result: TrainResult):
    return [(int(i), int(t), float(v)) for i, t, v in result.trace]


# -- oracle studies -----------------------------------------------------


def oracle_correctness(scheme: str, sigma: float, T: int, n: int, replications: int, rng) -> tuple[float, float]:
    """Mean energy distance of reverse sampling with exact kernels, and of a fresh truth batch.

    Both are measured against the same truth batch in each replication.
    """
    rng = np.random.default_rng(rng)
    oracle = GmmReverseOracle(scheme, sigma, T)
    gen, base = [], []
    for _ in range(replications):
        truth = oracle.spec.sample(n, rng)
        x = reverse_markov_sample(oracle, n, rng)
        gen.append(energy_distance(x, truth))
        base.append(energy_distance(oracle.spec.sample(n, rng), truth))
    return float(np.mean(gen)), float(np.mean(base))


def closed_form_check(scheme: str, sigma: float, T: int, n: int, rng) -> list[dict]:
    """Within-component regression of X_{t-1} on X_t along simulated forward paths.

    Paths start from the +1 component only, where the pair is jointly
    Gaussian with the closed-form slope and residual variance.
    """
    rng = np.random.default_rng(rng)
    bridge = MatchedMarginalBridge(scheme, T, 1)
    x0 = 1.0 + sigma * rng.standard_normal((n, 1))
    path = bridge.sample_path(x0, rng)
    rows = []
    for t in range(1, T + 1):
        prev, cur = path[t - 1].ravel(), path[t].ravel()
        cov = np.cov(prev, cur)
        slope = cov[0, 1] / cov[1, 1]
        resid = cov[0, 0] - cov[0, 1] ** 2 / cov[1, 1]
        p = reverse_params(scheme, sigma, t, T)
        rows.append(
            {
                "scheme": scheme,
                "t": t,
                "a": p.a,
                "a_mc": float(slope),
                "slope_scale": float(np.sqrt(cov[0, 0] / cov[1, 1])),
                "tau2": p.tau2,
                "tau2_mc": float(resid),
            }
        )
    return rows


def stratified_normal(n: int, rng: np.random.Generator) -> np.ndarray:
    """One standard normal draw per probability stratum [i/n, (i+1)/n)."""
    u = (np.arange(n) + rng.random(n)) / n
    return ndtri(u)


def two_point_target(n: int) -> np.ndarray:
    """Quantiles of the uniform law on {-1, +1} at levels (i + 1/2) / n."""
    levels = (np.arange(n) + 0.5) / n
    return np.where(levels < 0.5, -1.0, 1.0)


def fm_compare(steps, seeds: int, n: int, oracle_sigma: float, rng) -> list[dict]:
    """1-D W2 error of flow-ODE (exact field) and of reverse sampling (exact kernels).

    The flow starts from stratified normal draws so its error is the
    discretisation error alone. The reverse sampler uses the flow-matching
    bridge on the +-1 mixture with a tiny component std.
    """
    target = two_point_target(n)
    rows = []
    for rep, child in enumerate(np.random.SeedSequence(rng).spawn(seeds)):
        flow_seq, oracle_seq = child.spawn(2)
        x_T = stratified_normal(n, np.random.default_rng(flow_seq))[:, None]
        g = np.random.default_rng(oracle_seq)
        for T in steps:
            x = flow_ode_generate(two_point_field, int(T), n, g, x_T=x_T)
            rows.append({"method": "flow-ode", "steps": int(T), "seed": rep, "w2": wasserstein2_1d(x, target)})
            y = reverse_markov_sample(GmmReverseOracle("flow-matching", oracle_sigma, int(T)), n, g)
            rows.append({"method": "reverse-oracle", "steps": int(T), "seed": rep, "w2": wasserstein2_1d(y, target)})
    return rows


def summarize_fm(rows) -> list[dict]:
    out = []
    for method in ("flow-ode", "reverse-oracle"):
        for T in sorted({r["steps"] for r in rows}):
            w = np.array([r["w2"] for r in rows if r["method"] == method and r["steps"] == T])
            out.append({"method": method, "steps": T, "mean_w2": float(w.mean()), "sd_w2": float(w.std(ddof=1)) if w.size > 1 else 0.0, "seeds": int(w.size)})
    return out


# -- trained GMM runs ---------------------------------------------------


def train_gmm_stack(scheme: str, T: int, data, tcfg: TrainConfig, hidden, rng) -> tuple[GeneratorStack, TrainResult]:
    bridge = MatchedMarginalBridge(scheme, T, data.shape[1])
    stack = GeneratorStack(bridge, hidden=tuple(hidden), rng=rng)
    result = train(stack, data, tcfg, rng)
    return stack, result


def _gmm_data(cfg: ExperimentConfig, seq):
    g = cfg.section("gmm")
    spec = GmmSpec.three_cluster(g["sigma"])
    rng = np.random.default_rng(seq)
    data = spec.sample(g["n_train"], rng)
    truth = spec.sample(g["n_generate"], rng)
    fresh = spec.sample(g["n_generate"], rng)
    return spec, data, truth, fresh


def _thin(x: np.ndarray) -> np.ndarray:
    return x[:SCATTER_POINTS]


def _sample_rows(label: str, x: np.ndarray):
    return [(label, *map(float, row)) for row in x]


def density_curves(sigma: float, t: int, T: int, x: float, grid=None) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Exact densities of X_{t-1} given X_t = x for each scheme on the +-1 mixture."""
    grid = np.linspace(-1.5, 2.0, 200) if grid is None else np.asarray(grid, dtype=float)
    return {s: (grid, reverse_conditional_density(reverse_params(s, sigma, t, T), x, grid)) for s in SCHEMES}


def run_gmm(cfg: ExperimentConfig, threads: int = 1) -> ExperimentOutput:
    g = cfg.section("gmm")
    tcfg = train_config(cfg)
    hidden = cfg.section("train")["hidden"]
    data_seq, *run_seqs = _seeds(cfg, 3)
    spec, data, truth, fresh = _gmm_data(cfg, data_seq)
    m = g["eval_size"]

    base_ed = energy_distance(fresh[:m], truth[:m])
    metrics = [
        {"run": "truth", "steps": 0, "t": 0, "metric": "energy_distance", "value": base_ed},
        {"run": "truth", "steps": 0, "t": 0, "metric": "low_density_fraction", "value": spec.low_density_fraction(fresh)},
    ]
    samples = _sample_rows("truth", truth)
    plots = {"truth_scatter": svg.scatter({"truth": _thin(truth)}, "truth samples", "x1", "x2")}
    tables = {}
    marginal_series = {}

    def job(args):
        T, seq = args
        rng = np.random.default_rng(seq)
        start = time.perf_counter()
        stack, result = train_gmm_stack(g["scheme"], T, data, tcfg, hidden, rng)
        path = reverse_markov_sample(stack, g["n_generate"], rng, return_path=True)
        forward = stack.bridge.sample_path(truth[:m], rng)
        return T, path, forward, result, time.perf_counter() - start

    runtimes = {}
    for T, path, forward, result, runtime in _map(job, list(zip((g["baseline_steps"], g["steps"]), run_seqs)), threads):
        label = "engression" if T == 1 else f"rml_T{T}"
        x0 = path[0]
        metrics.append({"run": label, "steps": T, "t": 0, "metric": "energy_distance", "value": energy_distance(x0[:m], truth[:m])})
        metrics.append({"run": label, "steps": T, "t": 0, "metric": "low_density_fraction", "value": spec.low_density_fraction(x0)})
        eds = [energy_distance(path[t][:m], forward[t]) for t in range(T + 1)]
        for t in range(1, T + 1):
            metrics.append({"run": label, "steps": T, "t": t, "metric": "marginal_energy_distance", "value": eds[t]})
        marginal_series[label] = (np.arange(T + 1), np.array(eds))
        samples += _sample_rows(label, x0)
        plots[f"{label}_scatter"] = svg.scatter({label: _thin(x0)}, f"generated, T={T}", "x1", "x2")
        tables[f"trace_{label}"] = (TRACE_COLUMNS, _trace_rows(result))
        runtimes[label] = runtime
    plots["marginal_energy"] = svg.lines(marginal_series, "generated vs forward marginals", "t", "energy distance")

    curves = density_curves(g["density_sigma"], g["density_step"], g["density_steps"], g["density_x"])
    plots["conditional_densities"] = svg.lines(
        curves, f"p(x_t-1 | x_t = {g['density_x']:g})", "y", "density"
    )
    tables["densities"] = (
        ("scheme", "y", "density"),
        [(s, float(y), float(p)) for s, (ys, ps) in curves.items() for y, p in zip(ys, ps)],
    )
    return ExperimentOutput(
        ("run", "steps", "t", "metric", "value"),
        metrics,
        ("run", "x1", "x2"),
        samples,
        plots,
        tables,
        {"train_seconds": runtimes},
    )


def run_gmm_alternating(cfg: ExperimentConfig, threads: int = 1) -> ExperimentOutput:
    g = cfg.section("gmm")
    tcfg = train_config(cfg)
    data_seq, train_seq, alg3_seq, alg4_seq = _seeds(cfg, 4)
    spec, data, truth, fresh = _gmm_data(cfg, data_seq)
    m = g["eval_size"]
    start = time.perf_counter()
    stack, result = train_gmm_stack(g["scheme"], g["steps"], data, tcfg, cfg.section("train")["hidden"], np.random.default_rng(train_seq))
    train_seconds = time.perf_counter() - start
    schedule = list(g["schedule"]) or None
    outputs = {
        "truth": fresh,
        "reverse": reverse_markov_sample(stack, g["n_generate"], np.random.default_rng(alg3_seq)),
        "alternating": alternating_generate(stack, schedule, g["n_generate"], np.random.default_rng(alg4_seq)),
    }
    metrics, samples = [], []
    for label, x in outputs.items():
        metrics.append({"algorithm": label, "steps": g["steps"], "metric": "low_density_fraction", "value": spec.low_density_fraction(x)})
        metrics.append({"algorithm": label, "steps": g["steps"], "metric": "energy_distance", "value": energy_distance(x[:m], truth[:m])})
        samples += _sample_rows(label, x)
    plots = {
        f"{label}_scatter": svg.scatter({label: _thin(x)}, label, "x1", "x2") for label, x in outputs.items()
    }
    return ExperimentOutput(
        ("algorithm", "steps", "metric", "value"),
        metrics,
        ("algorithm", "x1", "x2"),
        samples,
        plots,
        {"trace": (TRACE_COLUMNS, _trace_rows(result))},
        {"train_seconds": train_seconds, "schedule": schedule or [0] * (g["steps"] + 1)},
    )


def run_gmm_forward_compare(cfg: ExperimentConfig, threads: int = 1) -> ExperimentOutput:
    g = cfg.section("gmm")
    tcfg = train_config(cfg)
    hidden = cfg.section("train")["hidden"]
    schemes = g["schemes"]
    m = g["eval_size"]
    reps = np.random.SeedSequence(cfg.seed).spawn(g["repetitions"])
    jobs = []
    for r, rep_seq in enumerate(reps):
        data_seq, *scheme_seqs = rep_seq.spawn(1 + len(schemes))
        jobs += [(r, s, data_seq, seq) for s, seq in zip(schemes, scheme_seqs)]

    def job(args):
        r, scheme, data_seq, seq = args
        spec, data, truth, _ = _gmm_data(cfg, data_seq)
        rng = np.random.default_rng(seq)
        stack, result = train_gmm_stack(scheme, g["steps"], data, tcfg, hidden, rng)
        x = reverse_markov_sample(stack, g["n_generate"], rng)
        return r, scheme, energy_distance(x[:m], truth[:m]), spec.low_density_fraction(x), x, result

    metrics, samples, tables = [], [], {}
    series: dict[str, list] = {s: [] for s in schemes}
    for r, scheme, ed, ldf, x, result in _map(job, jobs, threads):
        metrics.append({"repetition": r, "scheme": scheme, "steps": g["steps"], "energy_distance": ed, "low_density_fraction": ldf})
        series[scheme].append(ed)
        if r == g["repetitions"] - 1:
            samples += _sample_rows(scheme, x)
        tables[f"trace_{scheme}_rep{r}"] = (TRACE_COLUMNS, _trace_rows(result))
    wins = winners(metrics)
    plots = {
        "energy_by_repetition": svg.lines(
            {s: (np.arange(len(v)), np.array(v)) for s, v in series.items()},
            f"energy distance to truth, T={g['steps']}",
            "repetition",
            "energy distance",
        )
    }
    return ExperimentOutput(
        ("repetition", "scheme", "steps", "energy_distance", "low_density_fraction"),
        metrics,
        ("scheme", "x1", "x2"),
        samples,
        plots,
        tables,
        {"wins": wins},
    )


def winners(rows) -> dict[str, int]:
    """Per scheme, the number of repetitions in which it had the smallest energy distance."""
    by_rep: dict[int, list] = {}
    for row in rows:
        by_rep.setdefault(row["repetition"], []).append(row)
    wins = {row["scheme"]: 0 for row in rows}
    for rep in by_rep.values():
        wins[min(rep, key=lambda r: r["energy_distance"])["scheme"]] += 1
    return wins


# -- SEM, two-sample, flow, spatial --------------------------------------


def sem_spec(cfg: ExperimentConfig) -> SemSpec:
    s = cfg.section("sem")
    if s["adjacency"] == "zero":
        return SemSpec.zero(s["d"])
    return SemSpec.random(s["d"], np.random.default_rng(s["adjacency_seed"]))


def run_sem_efficiency(cfg: ExperimentConfig, threads: int = 1) -> ExperimentOutput:
    s = cfg.section("sem")
    spec = sem_spec(cfg)
    report = efficiency_study(spec, s["ns"], s["replications"], cfg.seed, s["methods"], threads)
    columns = (*report.columns, "flagged")
    metrics = [{**rec, "flagged": row.flagged} for rec, row in zip(report.records(), report.rows)]
    d = spec.d
    idx = np.tril_indices(d, -1)
    names = tuple(f"b{i + 1}{j + 1}" for i, j in zip(*idx))
    samples = []
    for (method, n), est in report.estimates.items():
        for rep, B in enumerate(est):
            samples.append((method, n, rep, *map(float, B[idx])))
    series = {}
    for method in s["methods"]:
        rows = [r for r in report.rows if r.method == method]
        series[method] = (np.log10([r.n for r in rows]), np.log10([max(r.variance_sum, 1e-300) for r in rows]))
    theory = {m: asymptotic_variance(m, spec) for m in ("rml", "mle")}
    return ExperimentOutput(
        columns,
        metrics,
        ("method", "n", "replication", *names),
        samples,
        {"variance_sum": svg.lines(series, f"estimator variance, d={d}", "log10 n", "log10 variance sum")},
        {},
        {"adjacency": spec.B.tolist(), "asymptotic_variance_sum": theory},
    )


def run_two_sample(cfg: ExperimentConfig, threads: int = 1) -> ExperimentOutput:
    spec = TestSpec(**cfg.section("two-sample"))
    report = power_study(spec, cfg.seed)
    samples = [(i, *(float(report.null[f][i]) for f in report.null)) for i in range(spec.null_sims)]
    series = {f: (report.separations(), report.power(f)) for f in report.null}
    return ExperimentOutput(
        report.columns,
        report.records(),
        ("simulation", *(f"null_{f}" for f in report.null)),
        samples,
        {"power": svg.lines(series, f"power, d={spec.d}, n={spec.n}", "Frobenius separation", "rejection rate")},
    )


def run_fm_compare(cfg: ExperimentConfig, threads: int = 1) -> ExperimentOutput:
    f = cfg.section("fm")
    rows = fm_compare(f["steps"], f["seeds"], f["n"], f["oracle_sigma"], cfg.seed)
    summary = summarize_fm(rows)
    series = {
        method: (
            np.array([r["steps"] for r in summary if r["method"] == method]),
            np.array([r["mean_w2"] for r in summary if r["method"] == method]),
        )
        for method in ("flow-ode", "reverse-oracle")
    }
    return ExperimentOutput(
        ("method", "steps", "mean_w2", "sd_w2", "seeds"),
        summary,
        ("method", "steps", "seed", "w2"),
        rows,
        {"w2_by_steps": svg.lines(series, "W2 error to the two-point target", "T", "W2")},
    )


def run_spatial(cfg: ExperimentConfig, threads: int = 1) -> ExperimentOutput:
    p = cfg.section("spatial")
    spec = SpatialFieldSpec(p["side"], p["smoothing"], p["large_scale"], p["n_train"], p["n_eval"])
    report = pooling_study(
        spec,
        p["kernels"],
        train_config(cfg),
        cfg.seed,
        hidden=tuple(cfg.section("train")["hidden"]),
        n_generate=p["n_generate"],
        iterations_per_step=p["iterations_per_step"] or None,
        threads=threads,
    )
    samples = []
    for k, x in report.samples.items():
        for i, row in enumerate(x[: p["samples_written"]]):
            samples.append((k, i, *map(float, row)))
    plots = {}
    for metric in METRICS:
        pts = sorted((report.steps(k), report.value(metric, k)) for k in p["kernels"])
        steps = np.array([s for s, _ in pts])
        plots[metric] = svg.lines(
            {
                "pooling RML": (steps, np.array([v for _, v in pts])),
                "truth baseline": (steps, np.full(steps.size, report.baseline[metric])),
            },
            metric,
            "steps T",
            metric,
        )
    tables = {f"trace_kernel{k}": (TRACE_COLUMNS, _trace_rows(r)) for k, r in report.traces.items()}
    return ExperimentOutput(
        report.columns,
        report.records(),
        ("kernel", "index", *(f"c{i}" for i in range(spec.dim))),
        samples,
        plots,
        tables,
        {"steps": {int(k): report.steps(k) for k in p["kernels"]}},
    )


RUNNERS = {
    "gmm": run_gmm,
    "gmm-alternating": run_gmm_alternating,
    "gmm-forward-compare": run_gmm_forward_compare,
    "sem-efficiency": run_sem_efficiency,
    "two-sample": run_two_sample,
    "fm-compare": run_fm_compare,
    "spatial": run_spatial,
}


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> ExperimentOutput:
    if cfg.tag not in RUNNERS:
        raise ConfigurationError(f"unknown experiment tag {cfg.tag!r}")
    return RUNNERS[cfg.tag](cfg, threads)
