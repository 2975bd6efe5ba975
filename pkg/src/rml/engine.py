"""Reverse Markov learning: training, generation and the flow-ODE baseline.

A *reverse kernel* is anything with a ``bridge`` attribute and a
``step(t, x_t, rng, y=None)`` method returning a draw of X_{t-1}. Trained
:class:`GeneratorStack` objects and the exact oracles in :mod:`rml.gmm` both
qualify, so the generation routines below run on either.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from rml.bridge import BridgingProcess, bridge_from_config
from rml.errors import ConfigurationError, NonFiniteError, TrainingDivergence, UsageError
from rml.nn import DEFAULT_HIDDEN, AdamState, InputSplit, MlpGenerator, adam_step
from rml.scoring import as_batch, engression_loss, fm_regression_loss


@dataclass
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 256
    learning_rate: float = 1e-4
    seed: int = 0
    shared: bool | None = None  # None: shared iff all step dims agree
    schedule: str = "constant"  # or "cosine": decay to 0 over the run

    def __post_init__(self):
        if self.iterations <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ConfigurationError("iterations, batch size and learning rate must be positive")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown learning-rate schedule {self.schedule!r}")

    def lr_at(self, it: int) -> float:
        if self.schedule == "cosine":
            return 0.5 * self.learning_rate * (1.0 + np.cos(np.pi * it / self.iterations))
        return self.learning_rate


class GeneratorStack:
    """Generators g_1..g_T for the reverse steps of ``bridge``.

    g_t maps [x_t | y | (t/T) | eps_t] to x_{t-1}. When every step has the
    same dimension one network is shared across steps and receives t/T as
    an extra input; otherwise each step gets its own network.
    """

    def __init__(
        self,
        bridge: BridgingProcess,
        hidden=DEFAULT_HIDDEN,
        y_dim: int = 0,
        shared: bool | None = None,
        noise_dims: dict[int, int] | None = None,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
    ):
        self.bridge = bridge
        self.T = bridge.T
        self.y_dim = int(y_dim)
        dims = bridge.dims()
        same = len(set(dims)) == 1
        self.shared = same if shared is None else bool(shared)
        if self.shared and not same:
            raise ConfigurationError(f"a shared generator needs equal step dims, got {dims}")
        self.noise_dims = {t: dims[t - 1] for t in range(1, self.T + 1)}
        if noise_dims:
            self.noise_dims.update({int(k): int(v) for k, v in noise_dims.items()})
        self.hidden = tuple(hidden)
        self.nets: dict[int, MlpGenerator] = {}
        if self.shared:
            if len(set(self.noise_dims.values())) != 1:
                raise ConfigurationError("a shared generator needs one noise dimension")
            split = InputSplit(dims[0], self.y_dim, 1, self.noise_dims[1])
            self._shared_net = MlpGenerator.build(split.total, dims[0], hidden, rng, split, dtype)
            self.nets = {t: self._shared_net for t in range(1, self.T + 1)}
        else:
            for t in range(1, self.T + 1):
                split = InputSplit(dims[t], self.y_dim, 0, self.noise_dims[t])
                self.nets[t] = MlpGenerator.build(split.total, dims[t - 1], hidden, rng, split, dtype)
        self.trained = False

    def net(self, t: int) -> MlpGenerator:
        return self.nets[t]

    def unique_nets(self) -> list[tuple[int, MlpGenerator]]:
        if self.shared:
            return [(0, self._shared_net)]
        return list(self.nets.items())

    def condition(self, t: int, x_t, y=None) -> np.ndarray:
        """Non-noise generator inputs for step t."""
        x_t = as_batch(x_t)
        n = x_t.shape[0]
        parts = [x_t]
        if self.y_dim:
            if y is None:
                raise ConfigurationError("this stack was built with covariates; pass y")
            parts.append(np.broadcast_to(as_batch(y), (n, self.y_dim)))
        if self.shared:
            parts.append(np.full((n, 1), t / self.T))
        return np.concatenate(parts, axis=1)

    def step(self, t: int, x_t, rng: np.random.Generator, y=None) -> np.ndarray:
        if not self.trained:
            raise UsageError("generator stack has not been trained")
        cond = self.condition(t, x_t, y)
        eps = rng.standard_normal((cond.shape[0], self.noise_dims[t]))
        out = self.nets[t].forward(np.concatenate([cond, eps], axis=1))
        return np.asarray(out, dtype=float)

    # -- checkpoints ---------------------------------------------------

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {}
        for key, net in self.unique_nets():
            name = "g_shared.json" if self.shared else f"g_{key}.json"
            net.save(directory / name)
            files[str(key)] = name
        manifest = {
            "bridge": self.bridge.to_config(),
            "dims": self.bridge.dims(),
            "steps": self.T,
            "shared": self.shared,
            "y_dim": self.y_dim,
            "noise_dims": {str(k): v for k, v in self.noise_dims.items()},
            "hidden": list(self.hidden),
            "trained": self.trained,
            "files": files,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory, bridge: BridgingProcess | None = None) -> GeneratorStack:
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        bridge = bridge or bridge_from_config(manifest["bridge"])
        stack = cls(
            bridge,
            hidden=manifest["hidden"],
            y_dim=manifest["y_dim"],
            shared=manifest["shared"],
            noise_dims={int(k): v for k, v in manifest["noise_dims"].items()},
        )
        if stack.shared:
            net = MlpGenerator.load(directory / manifest["files"]["0"])
            stack._shared_net = net
            stack.nets = {t: net for t in range(1, stack.T + 1)}
        else:
            stack.nets = {
                int(k): MlpGenerator.load(directory / f) for k, f in manifest["files"].items()
            }
        stack.trained = manifest["trained"]
        return stack


@dataclass
class TrainResult:
    trace: np.ndarray  # rows of (iteration, t, loss)

    def running_mean(self, window: int = 200) -> np.ndarray:
        loss = self.trace[:, 2]
        if loss.size < window:
            return np.array([loss.mean()])
        c = np.cumsum(np.concatenate(([0.0], loss)))
        return (c[window:] - c[:-window]) / window


def train(
    stack: GeneratorStack,
    data,
    cfg: TrainConfig,
    rng: np.random.Generator,
    y=None,
) -> TrainResult:
    """Fit every g_t by the per-step energy loss on forward-path pairs.

    Each iteration draws one step t uniformly from 1..T, a minibatch of
    training rows, their (x_{t-1}, x_t) forward pairs and two noise
    batches, and takes one Adam step on g_t.
    """
    data = as_batch(data)
    bridge = stack.bridge
    if data.shape[1] != bridge.dim(0):
        raise ConfigurationError(f"data has dim {data.shape[1]}, bridge expects {bridge.dim(0)}")
    if y is not None:
        y = as_batch(y)
    n = data.shape[0]
    states = {key: AdamState.for_net(net, lr=cfg.learning_rate) for key, net in stack.unique_nets()}
    trace = np.empty((cfg.iterations, 3))
    for it in range(cfg.iterations):
        t = int(rng.integers(1, stack.T + 1))
        idx = rng.integers(0, n, size=cfg.batch_size)
        yb = None if y is None else y[idx]
        x_prev, x_t = bridge.sample_pair(t, data[idx], rng, yb)
        cond = stack.condition(t, x_t, yb)
        k = stack.noise_dims[t]
        eps = rng.standard_normal((cfg.batch_size, k))
        eps2 = rng.standard_normal((cfg.batch_size, k))
        net = stack.nets[t]
        loss, grads = engression_loss(net, x_prev, cond, eps, eps2)
        if not np.isfinite(loss):
            raise TrainingDivergence(f"non-finite loss at iteration {it}", it, trace[:it])
        state = states[0 if stack.shared else t]
        state.lr = cfg.lr_at(it)
        try:
            adam_step(net, state, grads)
        except NonFiniteError as exc:
            raise TrainingDivergence(f"{exc} at iteration {it}", it, trace[:it]) from exc
        trace[it] = (it, t, loss)
    stack.trained = True
    return TrainResult(trace)


def _check_ready(kernel) -> None:
    if getattr(kernel, "trained", True) is False:
        raise UsageError("generator stack has not been trained")


def reverse_markov_sample(kernel, n: int, rng: np.random.Generator, y=None, return_path: bool = False):
    """Start from q* and apply the reverse kernels for t = T, ..., 1.

    Returns X~_0, or the list [X~_0, ..., X~_T] with ``return_path``.
    """
    _check_ready(kernel)
    bridge = kernel.bridge
    x = as_batch(bridge.sample_terminal(n, rng, y))
    path = [x]
    for t in range(bridge.T, 0, -1):
        x = as_batch(kernel.step(t, x, rng, y))
        path.append(x)
    if return_path:
        return path[::-1]
    return x


def _resolve_schedule(schedule, T: int) -> list[int]:
    if schedule is None:
        return [0] * (T + 1)
    if callable(schedule):
        s = [int(schedule(t)) for t in range(T + 1)]
    else:
        s = [int(v) for v in schedule]
    if len(s) != T + 1:
        raise ConfigurationError(f"schedule needs T + 1 = {T + 1} entries, got {len(s)}")
    for t, v in enumerate(s):
        if not 0 <= v <= t:
            raise ConfigurationError(f"schedule value s({t}) = {v} outside 0..{t}")
    return s


def alternating_generate(
    kernel,
    schedule=None,
    n: int = 1000,
    rng: np.random.Generator | None = None,
    y=None,
    return_path: bool = False,
):
    """Reverse generation interleaved with forward regeneration.

    For t = T..1 the chain is run backwards from X~_t down to step s(t-1),
    then the forward process regenerates X~_{t-1} from that state. With
    s(t) = t this is plain reverse generation; the default is s(t) = 0.
    ``return_path`` also returns [X~_0, ..., X~_T].
    """
    _check_ready(kernel)
    rng = rng if rng is not None else np.random.default_rng()
    bridge = kernel.bridge
    T = bridge.T
    s = _resolve_schedule(schedule, T)
    for t in range(T):
        if not bridge.supports_regeneration(s[t], t):
            raise ConfigurationError(
                f"{type(bridge).__name__} cannot regenerate step {t} from step {s[t]}"
            )
    x = as_batch(bridge.sample_terminal(n, rng, y))
    path = {T: x}
    for t in range(T, 0, -1):
        xp = x
        for k in range(t, s[t - 1], -1):
            xp = as_batch(kernel.step(k, xp, rng, y))
        x = bridge.regenerate(s[t - 1], t - 1, xp, rng, y)
        path[t - 1] = x
    if return_path:
        return [path[t] for t in range(T + 1)]
    return x


# -- flow matching ------------------------------------------------------


def build_field(dim: int, hidden=DEFAULT_HIDDEN, rng=None, y_dim: int = 0, dtype=np.float64) -> MlpGenerator:
    """Velocity-field network with inputs [x | y | s]."""
    split = InputSplit(dim, y_dim, 1, 0)
    return MlpGenerator.build(split.total, dim, hidden, rng, split, dtype)


def fm_train(field: MlpGenerator, data, cfg: TrainConfig, rng: np.random.Generator, y=None) -> TrainResult:
    """Regress the field on eps - X along h = (1 - s) X + s eps, s ~ U[0, 1]."""
    data = as_batch(data)
    if data.shape[1] != field.out_dim:
        raise ConfigurationError(f"data has dim {data.shape[1]}, field outputs {field.out_dim}")
    n, d = data.shape
    state = AdamState.for_net(field, lr=cfg.learning_rate)
    trace = np.empty((cfg.iterations, 3))
    for it in range(cfg.iterations):
        idx = rng.integers(0, n, size=cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size, d))
        s = rng.random(cfg.batch_size)
        yb = None if y is None else as_batch(y)[idx]
        loss, grads = fm_regression_loss(field, data[idx], eps, s, yb)
        if not np.isfinite(loss):
            raise TrainingDivergence(f"non-finite loss at iteration {it}", it, trace[:it])
        state.lr = cfg.lr_at(it)
        try:
            adam_step(field, state, grads)
        except NonFiniteError as exc:
            raise TrainingDivergence(f"{exc} at iteration {it}", it, trace[:it]) from exc
        trace[it] = (it, 0, loss)
    return TrainResult(trace)


def _as_velocity(field) -> Callable:
    if isinstance(field, MlpGenerator):

        def velocity(x, s, y=None):
            n = x.shape[0]
            parts = [x] if y is None else [x, np.broadcast_to(as_batch(y), (n, field.split.y_dim))]
            parts.append(np.full((n, 1), s))
            return field.forward(np.concatenate(parts, axis=1))

        return velocity
    return field


def flow_ode_generate(
    field,
    T_steps: int,
    n: int,
    rng: np.random.Generator,
    dim: int | None = None,
    y=None,
    x_T=None,
) -> np.ndarray:
    """Euler steps X_{t-1} = X_t - (1/T) g(X_t, t/T) from X_T ~ N(0, I).

    ``field`` is a trained :class:`MlpGenerator` or any callable
    ``g(x, s, y=None)``.
    """
    if T_steps < 1:
        raise ConfigurationError(f"need at least one step, got {T_steps}")
    if x_T is None:
        if dim is None:
            if not isinstance(field, MlpGenerator):
                raise ConfigurationError("pass dim for an analytic field")
            dim = field.out_dim
        x = rng.standard_normal((n, dim))
    else:
        x = np.array(as_batch(x_T), copy=True)
    g = _as_velocity(field)
    for t in range(T_steps, 0, -1):
        x = x - g(x, t / T_steps, y) / T_steps
    return x


def two_point_field(x, s, y=None):
    """Exact flow-matching velocity for X_0 uniform on {-1, +1}.

    g(x, s) = E[eps - X_0 | (1 - s) X_0 + s eps = x].
    """
    x = np.asarray(x, dtype=float)
    # posterior of X_0 = +1 vs -1: logistic in 2 (1 - s) x / s^2
    w_plus = 0.5 * (1.0 + np.tanh((1.0 - s) * x / (s * s)))
    m = 2.0 * w_plus - 1.0  # E[X_0 | h = x]
    return (x - (1.0 - s) * m) / s - m
