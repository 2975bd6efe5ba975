"""Command line: ``rml run <cfg>`` and ``rml validate <cfg>``.

Exit codes: 0 success, 2 invalid configuration, 3 training divergence,
1 any other failure.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from rml import __version__
from rml.config import ConfigError, load_config
from rml.errors import ConfigurationError, TrainingDivergence
from rml.io import sha256, write_csv

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rml", description="Reverse Markov learning experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the experiment described by a config file")
    run.add_argument("config")
    run.add_argument("--seed", type=int, default=None, help="override experiment.seed")
    run.add_argument("--out", default=None, help="output directory (overrides experiment.output)")
    run.add_argument("--threads", type=int, default=1, help="worker cap for independent jobs")
    val = sub.add_parser("validate", help="check a config file without running it")
    val.add_argument("config")
    return p


def _versions() -> dict:
    return {"rml": __version__, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def _output_dir(cfg, out: str | None) -> Path:
    path = Path(out or cfg.output or f"runs/{cfg.tag}")
    manifest = path / "manifest.json"
    if manifest.exists():
        try:
            previous = json.loads(manifest.read_text()).get("tag")
        except (OSError, ValueError):
            previous = None
        if previous and previous != cfg.tag:
            raise ConfigError(f"output directory {str(path)!r} belongs to a {previous!r} run; choose another", "experiment.output")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _manifest(path: Path, cfg, status: str, artifacts: list[Path], runtime: float, extra=None) -> None:
    body = {
        "tag": cfg.tag,
        "seed": cfg.seed,
        "status": status,
        "config": cfg.echo(),
        "config_text": cfg.to_text(),
        "versions": _versions(),
        "runtime_seconds": runtime,
        "artifacts": {p.name: sha256(p) for p in sorted(artifacts)},
        "rerun": f"rml run {path / 'config.cfg'} --out {path}",
    }
    if extra:
        body["metadata"] = extra
    (path / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print("OK")
    print(cfg.to_text(), end="")
    return EXIT_OK


def cmd_run(args) -> int:
    from rml.experiments import run_experiment

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError(f"--seed must be nonnegative, got {args.seed}", "experiment.seed")
            cfg = replace(cfg, seed=args.seed)
        if args.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {args.threads}", "threads")
        out = _output_dir(cfg, args.out)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    (out / "config.cfg").write_text(cfg.to_text())
    start = time.perf_counter()
    try:
        result = run_experiment(cfg, threads=args.threads)
    except TrainingDivergence as exc:
        trace = out / "trace.csv"
        rows = [] if exc.trace is None else [(int(i), int(t), float(v)) for i, t, v in exc.trace]
        write_csv(trace, ("iteration", "t", "loss"), rows)
        _manifest(out, cfg, "diverged", [trace, out / "config.cfg"], time.perf_counter() - start, {"error": str(exc)})
        print(f"error: training diverged: {exc}; loss trace written to {trace}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    runtime = time.perf_counter() - start
    artifacts = [
        write_csv(out / "metrics.csv", result.metrics_columns, result.metrics),
        write_csv(out / "samples.csv", result.samples_columns, result.samples),
        out / "config.cfg",
    ]
    for name, (columns, rows) in result.tables.items():
        artifacts.append(write_csv(out / f"{name}.csv", columns, rows))
    for name, text in result.plots.items():
        p = out / f"{name}.svg"
        p.write_text(text)
        artifacts.append(p)
    _manifest(out, cfg, "ok", artifacts, runtime, result.metadata)
    print(f"{cfg.tag}: wrote {len(artifacts) + 1} files to {out} in {runtime:.1f}s")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    return {"run": cmd_run, "validate": cmd_validate}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
