"""Experiment configuration: ``key = value`` text with one section per module.

Every value is checked against a typed schema; problems are reported as
:class:`ConfigError` carrying the offending field and, when it exists in
the file, its line number.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from pathlib import Path

from rml.bridge import SCHEMES
from rml.errors import ConfigurationError

TAGS = ("gmm", "gmm-forward-compare", "gmm-alternating", "sem-efficiency", "two-sample", "fm-compare", "spatial")


class ConfigError(ConfigurationError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = f"line {line}: " if line else ""
        super().__init__(where + message)


def _int(s: str) -> int:
    return int(s)


def _float(s: str) -> float:
    return float(s)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(conv):
    def parse(s: str):
        items = [p.strip() for p in s.split(",") if p.strip()]
        return tuple(conv(p) for p in items)

    parse.__name__ = f"list of {conv.__name__.lstrip('_')}"
    return parse


def _str(s: str) -> str:
    return s.strip()


INT, FLOAT, STR, BOOL = _int, _float, _str, _bool
INTS, FLOATS, STRS = _list(_int), _list(_float), _list(_str)

REQUIRED = object()


def _train(iterations, batch_size, lr=1e-3, schedule="cosine", hidden=(128, 128, 128)):
    return {
        "iterations": (INT, iterations),
        "batch_size": (INT, batch_size),
        "learning_rate": (FLOAT, lr),
        "schedule": (STR, schedule),
        "hidden": (INTS, hidden),
    }


_GMM = {
    "sigma": (FLOAT, 0.1),
    "n_train": (INT, 10000),
    "n_generate": (INT, 10000),
    "eval_size": (INT, 5000),
}

SCHEMA: dict[str, dict[str, dict]] = {
    "gmm": {
        "gmm": {
            **_GMM,
            "steps": (INT, 10),
            "baseline_steps": (INT, 1),
            "scheme": (STR, "x-process"),
            "density_sigma": (FLOAT, 0.1),
            "density_step": (INT, 5),
            "density_steps": (INT, 10),
            "density_x": (FLOAT, 0.5),
        },
        "train": _train(20000, 256),
    },
    "gmm-alternating": {
        "gmm": {**_GMM, "steps": (INT, 5), "scheme": (STR, "x-process"), "schedule": (INTS, ())},
        "train": _train(20000, 256),
    },
    "gmm-forward-compare": {
        "gmm": {
            **_GMM,
            "steps": (INT, 10),
            "schemes": (STRS, ("flow-matching", "diffusion", "x-process")),
            "repetitions": (INT, 5),
        },
        "train": _train(20000, 256),
    },
    "sem-efficiency": {
        "sem": {
            "d": (INT, 5),
            "ns": (INTS, (100, 1000, 10000)),
            "replications": (INT, 100),
            "methods": (STRS, ("engression", "rml", "mle")),
            "adjacency": (STR, "random"),
            "adjacency_seed": (INT, 1),
        },
    },
    "two-sample": {
        "two-sample": {
            "d": (INT, 5),
            "n": (INT, 200),
            "null_sims": (INT, 500),
            "level": (FLOAT, 0.05),
            "separations": (FLOATS, (0.0, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0)),
            "replications": (INT, 200),
        },
    },
    "fm-compare": {
        "fm": {
            "steps": (INTS, (2, 5, 10, 50)),
            "seeds": (INT, 20),
            "n": (INT, 4000),
            "oracle_sigma": (FLOAT, 1e-3),
        },
    },
    "spatial": {
        "spatial": {
            "side": (INT, 16),
            "smoothing": (FLOAT, 1.5),
            "large_scale": (FLOAT, 1.0),
            "n_train": (INT, 2000),
            "n_eval": (INT, 1000),
            "n_generate": (INT, 4000),
            "kernels": (INTS, (4, 2)),
            "iterations_per_step": (INT, 8000),
            "samples_written": (INT, 100),
        },
        "train": _train(40000, 128),
    },
}

EXPERIMENT = {
    "tag": (STR, REQUIRED),
    "seed": (INT, REQUIRED),
    "output": (STR, ""),
}


def _line_index(text: str) -> dict[tuple[str, str | None], int]:
    """Map (section, key) and (section, None) to 1-based line numbers."""
    index: dict = {}
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.fullmatch(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            index.setdefault((section, None), no)
            continue
        key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
        index.setdefault((section, key), no)
    return index


@dataclass
class ExperimentConfig:
    tag: str
    seed: int
    output: str
    sections: dict[str, dict] = field(default_factory=dict)
    source: str = ""

    def section(self, name: str) -> dict:
        return self.sections[name]

    def echo(self) -> dict:
        out = {"experiment": {"tag": self.tag, "seed": self.seed, "output": self.output}}
        for name, values in self.sections.items():
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in values.items()}
        return out

    def to_text(self) -> str:
        """Resolved config in the input format; parses back to an equal config."""
        lines = []
        for name, values in self.echo().items():
            lines.append(f"[{name}]")
            for k, v in values.items():
                if isinstance(v, list):
                    v = ", ".join(str(x) for x in v)
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)


def _convert(conv, raw: str, name: str, line):
    try:
        return conv(raw)
    except ValueError:
        kind = conv.__name__.lstrip("_")
        raise ConfigError(f"field {name!r}: cannot read {raw!r} as {kind}", name, line) from None


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    """Parse and check a config; raise :class:`ConfigError` on the first problem."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(f"malformed config: {exc.message.splitlines()[0]}", None, line) from None
    lines = _line_index(text)

    if not parser.has_section("experiment"):
        raise ConfigError("missing required section [experiment] (field 'experiment.tag')", "experiment.tag")
    exp = parser["experiment"]
    for key in exp:
        if key not in EXPERIMENT:
            raise ConfigError(
                f"unknown field 'experiment.{key}'; allowed: {', '.join(EXPERIMENT)}",
                f"experiment.{key}",
                lines.get(("experiment", key)),
            )
    values = {}
    for key, (conv, default) in EXPERIMENT.items():
        name = f"experiment.{key}"
        if key not in exp or not exp[key].strip():
            if default is REQUIRED:
                raise ConfigError(f"missing required field {name!r}", name, lines.get(("experiment", None)))
            values[key] = default
        else:
            values[key] = _convert(conv, exp[key], name, lines.get(("experiment", key)))
    tag = values["tag"]
    if tag not in TAGS:
        raise ConfigError(
            f"unknown experiment tag {tag!r}; known tags: {', '.join(TAGS)}",
            "experiment.tag",
            lines.get(("experiment", "tag")),
        )
    schema = SCHEMA[tag]
    for name in parser.sections():
        if name != "experiment" and name not in schema:
            raise ConfigError(
                f"section [{name}] is not used by tag {tag!r}; allowed: {', '.join(schema)}",
                name,
                lines.get((name, None)),
            )
    sections = {}
    for name, fields in schema.items():
        given = parser[name] if parser.has_section(name) else {}
        for key in given:
            if key not in fields:
                raise ConfigError(
                    f"unknown field '{name}.{key}'; allowed: {', '.join(fields)}",
                    f"{name}.{key}",
                    lines.get((name, key)),
                )
        resolved = {}
        for key, (conv, default) in fields.items():
            if key in given:
                resolved[key] = _convert(conv, given[key], f"{name}.{key}", lines.get((name, key)))
            else:
                resolved[key] = default
        sections[name] = resolved
    cfg = ExperimentConfig(tag, values["seed"], values["output"], sections, source)
    check_constraints(cfg, lines)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {str(path)!r}: {exc.strerror}") from None
    return parse_config(text, str(path))


def _positive(cfg: ExperimentConfig, lines, section: str, *keys):
    for k in keys:
        v = cfg.sections[section][k]
        vals = v if isinstance(v, tuple) else (v,)
        if not vals or any(x <= 0 for x in vals):
            raise ConfigError(f"field '{section}.{k}' must be positive, got {v}", f"{section}.{k}", lines.get((section, k)))


def _fail(msg, section, key, lines):
    raise ConfigError(msg, f"{section}.{key}", lines.get((section, key)))


def check_constraints(cfg: ExperimentConfig, lines=None) -> None:
    """Cross-field checks that need no computation beyond object construction."""
    lines = lines or {}
    s = cfg.sections
    if cfg.seed < 0:
        _fail(f"field 'experiment.seed' must be nonnegative, got {cfg.seed}", "experiment", "seed", lines)
    if "train" in s:
        _positive(cfg, lines, "train", "iterations", "batch_size", "learning_rate", "hidden")
        if s["train"]["schedule"] not in ("constant", "cosine"):
            _fail(f"field 'train.schedule' must be constant or cosine, got {s['train']['schedule']!r}",
                  "train", "schedule", lines)
    if "gmm" in s:
        g = s["gmm"]
        _positive(cfg, lines, "gmm", "sigma", "n_train", "n_generate", "eval_size", "steps")
        for key in ("scheme",) if "scheme" in g else ("schemes",):
            vals = g[key] if isinstance(g[key], tuple) else (g[key],)
            for v in vals:
                if v not in SCHEMES:
                    _fail(f"field 'gmm.{key}': unknown scheme {v!r}; choose from {', '.join(SCHEMES)}",
                          "gmm", key, lines)
        if g["eval_size"] > min(g["n_generate"], g["n_train"]):
            _fail("field 'gmm.eval_size' exceeds n_generate or n_train", "gmm", "eval_size", lines)
        if "baseline_steps" in g:
            _positive(cfg, lines, "gmm", "baseline_steps")
        if "repetitions" in g:
            _positive(cfg, lines, "gmm", "repetitions")
        if "density_x" in g:
            _positive(cfg, lines, "gmm", "density_sigma", "density_step")
            if g["density_step"] > g["density_steps"]:
                _fail("field 'gmm.density_step' must not exceed density_steps", "gmm", "density_step", lines)
        if g.get("schedule"):
            sched = g["schedule"]
            if len(sched) != g["steps"] + 1 or any(not 0 <= v <= t for t, v in enumerate(sched)):
                _fail(f"field 'gmm.schedule' needs steps + 1 = {g['steps'] + 1} entries with 0 <= s(t) <= t",
                      "gmm", "schedule", lines)
    if "sem" in s:
        m = s["sem"]
        _positive(cfg, lines, "sem", "ns", "replications")
        if m["d"] < 2:
            _fail(f"field 'sem.d' must be at least 2, got {m['d']}", "sem", "d", lines)
        if min(m["ns"]) <= m["d"]:
            _fail(f"field 'sem.ns' needs every n > d = {m['d']}", "sem", "ns", lines)
        from rml.sem import METHODS

        for v in m["methods"]:
            if v not in METHODS:
                _fail(f"field 'sem.methods': unknown method {v!r}; choose from {', '.join(METHODS)}",
                      "sem", "methods", lines)
        if m["adjacency"] not in ("random", "zero"):
            _fail(f"field 'sem.adjacency' must be random or zero, got {m['adjacency']!r}", "sem", "adjacency", lines)
    if "two-sample" in s:
        from rml.twosample import TestSpec

        t = s["two-sample"]
        try:
            TestSpec(**t)
        except ConfigurationError as exc:
            raise ConfigError(f"section [two-sample]: {exc}", "two-sample", lines.get(("two-sample", None))) from None
    if "fm" in s:
        _positive(cfg, lines, "fm", "steps", "seeds", "n", "oracle_sigma")
    if "spatial" in s:
        from rml.bridge import PoolingBridge
        from rml.spatial import SpatialFieldSpec

        p = s["spatial"]
        _positive(cfg, lines, "spatial", "n_train", "n_eval", "n_generate", "kernels", "samples_written")
        try:
            SpatialFieldSpec(p["side"], p["smoothing"], p["large_scale"], p["n_train"], p["n_eval"])
        except ConfigurationError as exc:
            raise ConfigError(f"section [spatial]: {exc}", "spatial.side", lines.get(("spatial", "side"))) from None
        for k in p["kernels"]:
            try:
                PoolingBridge(p["side"], k)
            except ConfigurationError as exc:
                _fail(f"field 'spatial.kernels': {exc}", "spatial", "kernels", lines)
