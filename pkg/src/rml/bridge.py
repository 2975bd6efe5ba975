"""Forward bridging processes from data (t = 0) to a known law (t = T).

Every bridge works on batches: ``x0`` is ``n x dim(0)`` and the returned
states are ``n x dim(t)``. Covariates ``y`` are accepted for interface
uniformity; none of the shipped bridges depends on them.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod

import numpy as np

from rml.errors import CapabilityError, ConfigurationError
from rml.scoring import as_batch

SCHEMES = ("flow-matching", "diffusion", "x-process")


class BridgingProcess(ABC):
    """Forward process X_0 -> X_1 -> ... -> X_T with X_T ~ q* known."""

    T: int

    @abstractmethod
    def dim(self, t: int) -> int: ...

    def dims(self) -> list[int]:
        return [self.dim(t) for t in range(self.T + 1)]

    @abstractmethod
    def sample_path(self, x0, rng: np.random.Generator, y=None) -> list[np.ndarray]:
        """All states x_0, ..., x_T for each row of ``x0``."""

    def sample_pair(self, t: int, x0, rng: np.random.Generator, y=None):
        """A joint draw of (x_{t-1}, x_t) given X_0 = x0."""
        self._check_step(t)
        path = self.sample_path(x0, rng, y)
        return path[t - 1], path[t]

    @abstractmethod
    def sample_terminal(self, n: int, rng: np.random.Generator, y=None) -> np.ndarray:
        """n draws from q*."""

    def supports_regeneration(self, s: int, t: int) -> bool:
        return s == t

    def regenerate(self, s: int, t: int, x_s, rng: np.random.Generator, y=None) -> np.ndarray:
        """Map draws with marginal p_s to draws with marginal p_t."""
        if not 0 <= s <= t <= self.T:
            raise ConfigurationError(f"regeneration needs 0 <= s <= t <= T, got s={s}, t={t}")
        if not self.supports_regeneration(s, t):
            raise CapabilityError(f"{type(self).__name__} cannot regenerate step {t} from step {s}")
        if s == t:
            return np.array(as_batch(x_s), copy=True)
        return self._regenerate(s, t, as_batch(x_s), rng)

    def _regenerate(self, s, t, x_s, rng):
        raise CapabilityError(f"{type(self).__name__} cannot regenerate step {t} from step {s}")

    @abstractmethod
    def to_config(self) -> dict: ...

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ConfigurationError(f"step {t} outside 1..{self.T}")

    def _check_x0(self, x0) -> np.ndarray:
        x0 = as_batch(x0)
        if x0.shape[1] != self.dim(0):
            raise ConfigurationError(f"x0 has dim {x0.shape[1]}, bridge expects {self.dim(0)}")
        return x0


class MatchedMarginalBridge(BridgingProcess):
    """X_t = (1 - t/T) X_0 + eps_t with three noise schemes of equal marginals.

    flow-matching: eps_t = (t/T) eta (one eta per path, i.e. linear interpolation)
    diffusion:     eps_t = eps_{t-1} + sqrt(2t - 1)/T eta_t
    x-process:     eps_t = (t/T) eta_t, eta_t independent across t

    In all three Var(eps_t) = (t/T)^2, so X_t has the same law.
    """

    def __init__(self, scheme: str, T: int, dim: int = 1):
        if scheme not in SCHEMES:
            raise ConfigurationError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
        if T < 1 or dim < 1:
            raise ConfigurationError(f"need T >= 1 and dim >= 1, got T={T}, dim={dim}")
        self.scheme = scheme
        self.T = int(T)
        self.data_dim = int(dim)

    def dim(self, t: int) -> int:
        return self.data_dim

    def _coef(self, t: int) -> float:
        return 1.0 - t / self.T

    def sample_path(self, x0, rng, y=None):
        x0 = self._check_x0(x0)
        n, d = x0.shape
        T = self.T
        path = [x0.copy()]
        if self.scheme == "flow-matching":
            eta = rng.standard_normal((n, d))
            for t in range(1, T + 1):
                path.append(self._coef(t) * x0 + (t / T) * eta)
        elif self.scheme == "diffusion":
            eps = np.zeros((n, d))
            for t in range(1, T + 1):
                eps = eps + math.sqrt(2 * t - 1) / T * rng.standard_normal((n, d))
                path.append(self._coef(t) * x0 + eps)
        else:
            for t in range(1, T + 1):
                path.append(self._coef(t) * x0 + (t / T) * rng.standard_normal((n, d)))
        return path

    def sample_pair(self, t, x0, rng, y=None):
        self._check_step(t)
        x0 = self._check_x0(x0)
        n, d = x0.shape
        T = self.T
        if self.scheme == "flow-matching":
            eta = rng.standard_normal((n, d))
            e_prev, e_t = (t - 1) / T * eta, t / T * eta
        elif self.scheme == "diffusion":
            e_prev = (t - 1) / T * rng.standard_normal((n, d))
            e_t = e_prev + math.sqrt(2 * t - 1) / T * rng.standard_normal((n, d))
        else:
            e_prev = (t - 1) / T * rng.standard_normal((n, d))
            e_t = t / T * rng.standard_normal((n, d))
        return self._coef(t - 1) * x0 + e_prev, self._coef(t) * x0 + e_t

    def sample_terminal(self, n, rng, y=None):
        return rng.standard_normal((n, self.data_dim))

    def supports_regeneration(self, s, t):
        return s == t or s == 0

    def _regenerate(self, s, t, x_s, rng):
        # s == 0: push a draw of the data marginal forward to the shared X_t law
        return self._coef(t) * x_s + (t / self.T) * rng.standard_normal(x_s.shape)

    def to_config(self):
        return {"kind": "matched", "scheme": self.scheme, "steps": self.T, "dim": self.data_dim}


class LinearInterpolationBridge(MatchedMarginalBridge):
    """X_t = (1 - t/T) X_0 + (t/T) X_T with X_T standard Gaussian."""

    def __init__(self, T: int, dim: int = 1):
        super().__init__("flow-matching", T, dim)


class MarkovDiffusionBridge(BridgingProcess):
    """X_t | X_{t-1} ~ N(sqrt(1 - sigma_t) X_{t-1}, sigma_t^2 I) with sigma_T = 1."""

    def __init__(self, T: int, dim: int = 1, schedule=None):
        if T < 1 or dim < 1:
            raise ConfigurationError(f"need T >= 1 and dim >= 1, got T={T}, dim={dim}")
        self.T = int(T)
        self.data_dim = int(dim)
        if schedule is None:
            schedule = [t / self.T for t in range(1, self.T + 1)]
        sched = np.asarray(schedule, dtype=float)
        if sched.shape != (self.T,):
            raise ConfigurationError(f"schedule needs {self.T} entries, got {sched.size}")
        if np.any(sched <= 0) or np.any(sched > 1) or np.any(np.diff(sched) <= 0):
            raise ConfigurationError("schedule must be increasing in (0, 1]")
        if sched[-1] != 1.0:
            raise ConfigurationError(f"schedule must end at 1, got {sched[-1]}")
        self.sigma = sched

    def dim(self, t):
        return self.data_dim

    def _kernel(self, t, x, rng):
        s = self.sigma[t - 1]
        return math.sqrt(1.0 - s) * x + s * rng.standard_normal(x.shape)

    def sample_path(self, x0, rng, y=None):
        x = self._check_x0(x0).copy()
        path = [x]
        for t in range(1, self.T + 1):
            x = self._kernel(t, x, rng)
            path.append(x)
        return path

    def sample_pair(self, t, x0, rng, y=None):
        self._check_step(t)
        x = self._check_x0(x0).copy()
        for k in range(1, t):
            x = self._kernel(k, x, rng)
        return x, self._kernel(t, x, rng)

    def sample_terminal(self, n, rng, y=None):
        return rng.standard_normal((n, self.data_dim))

    def supports_regeneration(self, s, t):
        return 0 <= s <= t <= self.T

    def _regenerate(self, s, t, x_s, rng):
        x = x_s
        for k in range(s + 1, t + 1):
            x = self._kernel(k, x, rng)
        return x

    def to_config(self):
        return {"kind": "markov-diffusion", "steps": self.T, "dim": self.data_dim,
                "schedule": self.sigma.tolist()}


class DimensionDropBridge(BridgingProcess):
    """Drop the last coordinate at each step; the final state is N(0, 1).

    X_t = X_0[:d - t] for t < d and X_d ~ N(0, 1), so T = d.
    """

    def __init__(self, d: int):
        if d < 1:
            raise ConfigurationError(f"need d >= 1, got {d}")
        self.d = int(d)
        self.T = self.d

    def dim(self, t):
        return self.d - t if t < self.d else 1

    def sample_path(self, x0, rng, y=None):
        x0 = self._check_x0(x0)
        path = [x0[:, : self.d - t].copy() for t in range(self.d)]
        path.append(rng.standard_normal((x0.shape[0], 1)))
        return path

    def sample_pair(self, t, x0, rng, y=None):
        self._check_step(t)
        x0 = self._check_x0(x0)
        prev = x0[:, : self.d - t + 1].copy()
        if t < self.d:
            return prev, x0[:, : self.d - t].copy()
        return prev, rng.standard_normal((x0.shape[0], 1))

    def sample_terminal(self, n, rng, y=None):
        return rng.standard_normal((n, 1))

    def to_config(self):
        return {"kind": "dimension-drop", "dim": self.d}


def average_pool(x, side: int, kernel: int) -> np.ndarray:
    """k x k average pooling of flattened ``side x side`` fields (row-major)."""
    x = as_batch(x)
    if side % kernel:
        raise ConfigurationError(f"kernel size {kernel} does not divide grid side {side}")
    c = side // kernel
    return x.reshape(-1, c, kernel, c, kernel).mean(axis=(2, 4)).reshape(-1, c * c)


class PoolingBridge(BridgingProcess):
    """Repeated k x k average pooling of square fields, then a Gaussian step.

    A side-16 grid with kernel 2 goes 16 -> 8 -> 4 -> 2 -> 1 and then to a
    standard Gaussian of the coarsest dimension (T = 5); kernel 4 gives
    16 -> 4 -> 1 -> Gaussian (T = 3).
    """

    def __init__(self, side: int, kernel: int, min_side: int = 1):
        if kernel < 2:
            raise ConfigurationError(f"kernel size must be >= 2, got {kernel}")
        if min_side < 1 or side < min_side:
            raise ConfigurationError(f"invalid grid side {side} / final side {min_side}")
        sides = [side]
        while sides[-1] > min_side:
            cur = sides[-1]
            if cur % kernel:
                raise ConfigurationError(
                    f"kernel size {kernel} does not divide grid side {cur} (grid {side})"
                )
            sides.append(cur // kernel)
        if sides[-1] != min_side:
            raise ConfigurationError(
                f"kernel size {kernel} does not reach final side {min_side} from grid {side}"
            )
        if len(sides) == 1:
            raise ConfigurationError(f"grid side {side} already at final side {min_side}")
        self.side = int(side)
        self.kernel = int(kernel)
        self.min_side = int(min_side)
        self.sides = sides
        self.T = len(sides)

    def dim(self, t):
        return self.sides[min(t, len(self.sides) - 1)] ** 2

    def side_at(self, t: int) -> int:
        return self.sides[min(t, len(self.sides) - 1)]

    def sample_path(self, x0, rng, y=None):
        x = self._check_x0(x0).copy()
        path = [x]
        for t in range(1, self.T):
            x = average_pool(x, self.sides[t - 1], self.kernel)
            path.append(x)
        path.append(rng.standard_normal((x.shape[0], self.dim(self.T))))
        return path

    def sample_pair(self, t, x0, rng, y=None):
        self._check_step(t)
        x = self._check_x0(x0)
        for k in range(1, t):
            x = average_pool(x, self.sides[k - 1], self.kernel)
        prev = np.array(x, copy=True)
        if t < self.T:
            return prev, average_pool(prev, self.sides[t - 1], self.kernel)
        return prev, rng.standard_normal((prev.shape[0], self.dim(self.T)))

    def sample_terminal(self, n, rng, y=None):
        return rng.standard_normal((n, self.dim(self.T)))

    def to_config(self):
        return {"kind": "pooling", "side": self.side, "kernel": self.kernel, "min_side": self.min_side}


class IdentityBridge(BridgingProcess):
    """Degenerate bridge X_t = X_0 for all t; q* is the data law itself.

    Only useful as a test fixture: ``terminal`` must sample the data law.
    """

    def __init__(self, T: int, dim: int, terminal):
        self.T = int(T)
        self.data_dim = int(dim)
        self.terminal = terminal

    def dim(self, t):
        return self.data_dim

    def sample_path(self, x0, rng, y=None):
        x0 = self._check_x0(x0)
        return [x0.copy() for _ in range(self.T + 1)]

    def sample_terminal(self, n, rng, y=None):
        return as_batch(self.terminal(n, rng))

    def supports_regeneration(self, s, t):
        return True

    def _regenerate(self, s, t, x_s, rng):
        return x_s.copy()

    def to_config(self):
        return {"kind": "identity", "steps": self.T, "dim": self.data_dim}


def bridge_from_config(cfg: dict) -> BridgingProcess:
    kind = cfg.get("kind")
    if kind == "matched":
        return MatchedMarginalBridge(cfg["scheme"], int(cfg["steps"]), int(cfg.get("dim", 1)))
    if kind == "markov-diffusion":
        return MarkovDiffusionBridge(int(cfg["steps"]), int(cfg.get("dim", 1)), cfg.get("schedule"))
    if kind == "dimension-drop":
        return DimensionDropBridge(int(cfg["dim"]))
    if kind == "pooling":
        return PoolingBridge(int(cfg["side"]), int(cfg["kernel"]), int(cfg.get("min_side", 1)))
    raise ConfigurationError(f"unknown bridge kind {kind!r}")
