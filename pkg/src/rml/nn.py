"""Small numpy MLP with hand-written backprop and Adam.

Just enough machinery for the desk-scale generators: dense layers, ReLU on
hidden layers, identity output, a cached forward pass for reverse-mode
gradients, and an Adam optimizer with bias correction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rml.errors import ConfigurationError, NonFiniteError, UsageError

DEFAULT_HIDDEN = (512, 512, 512, 512)


@dataclass
class InputSplit:
    """Column layout of a generator input: [x_t | y | time | noise]."""

    x_dim: int
    y_dim: int = 0
    time_dim: int = 0
    noise_dim: int = 0

    @property
    def total(self) -> int:
        return self.x_dim + self.y_dim + self.time_dim + self.noise_dim


class MlpGenerator:
    """Fully connected network ``widths[0] -> ... -> widths[-1]``.

    ``widths`` lists every layer width including input and output, so
    ``(3, 16, 2)`` is one hidden layer. With the default hidden widths the
    network has five weight layers of 512 units.
    """

    activation = "relu"

    def __init__(
        self,
        widths,
        rng: np.random.Generator | None = None,
        split: InputSplit | None = None,
        dtype=np.float64,
    ):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ConfigurationError(f"invalid layer widths {widths}")
        self.widths = widths
        self.dtype = np.dtype(dtype)
        self.split = split if split is not None else InputSplit(x_dim=widths[0])
        if self.split.total != widths[0]:
            raise ConfigurationError(
                f"input split sums to {self.split.total}, first width is {widths[0]}"
            )
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                # He init for ReLU layers
                w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            self.weights.append(w.astype(self.dtype))
            self.biases.append(np.zeros(fan_out, dtype=self.dtype))
        self._cache: list[np.ndarray] | None = None

    @classmethod
    def build(
        cls,
        in_dim: int,
        out_dim: int,
        hidden=DEFAULT_HIDDEN,
        rng: np.random.Generator | None = None,
        split: InputSplit | None = None,
        dtype=np.float64,
    ) -> MlpGenerator:
        return cls((in_dim, *hidden, out_dim), rng=rng, split=split, dtype=dtype)

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.weights)):
            names.extend((f"W{i}", f"b{i}"))
        return names

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def forward(self, batch: np.ndarray) -> np.ndarray:
        """Evaluate the network on an ``n x in_dim`` batch.

        The layer inputs are kept for a subsequent :meth:`backward` call.
        """
        h = np.asarray(batch, dtype=self.dtype)
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise ConfigurationError(
                f"expected batch of shape (n, {self.in_dim}), got {np.shape(batch)}"
            )
        cache = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                np.maximum(h, 0.0, out=h)
            cache.append(h)
        self._cache = cache
        return h

    __call__ = forward

    def backward(self, adjoint: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients given dLoss/dOutput of the last forward pass.

        Returned in the order of :meth:`params`.
        """
        if self._cache is None:
            raise UsageError("backward called without a forward pass")
        cache = self._cache
        g = np.asarray(adjoint, dtype=self.dtype)
        if g.shape != cache[-1].shape:
            raise UsageError(
                f"adjoint shape {g.shape} does not match last output {cache[-1].shape}"
            )
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        for i in range(len(self.weights) - 1, -1, -1):
            a_in = cache[i]
            grads[2 * i] = a_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = g @ self.weights[i].T
                # cache[i] is the post-ReLU activation of layer i-1
                g = g * (cache[i] > 0)
        return grads

    def input_gradient(self, adjoint: np.ndarray) -> np.ndarray:
        """dLoss/dInput for the last forward pass."""
        if self._cache is None:
            raise UsageError("input_gradient called without a forward pass")
        g = np.asarray(adjoint, dtype=self.dtype)
        for i in range(len(self.weights) - 1, -1, -1):
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (self._cache[i] > 0)
        return g

    def copy(self) -> MlpGenerator:
        other = MlpGenerator(self.widths, split=self.split, dtype=self.dtype)
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def check_finite(self) -> None:
        for name, p in zip(self.param_names(), self.params()):
            if not np.all(np.isfinite(p)):
                raise NonFiniteError(f"parameter block {name} is not finite")

    # -- checkpoints ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "activation": self.activation,
            "dtype": self.dtype.name,
            "split": vars(self.split),
            "arrays": [
                {"name": n, "shape": list(p.shape), "data": p.ravel().tolist()}
                for n, p in zip(self.param_names(), self.params())
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> MlpGenerator:
        net = cls(d["widths"], split=InputSplit(**d["split"]), dtype=d.get("dtype", "float64"))
        arrays = {a["name"]: a for a in d["arrays"]}
        for i in range(len(net.weights)):
            for prefix, store in (("W", net.weights), ("b", net.biases)):
                a = arrays[f"{prefix}{i}"]
                arr = np.asarray(a["data"], dtype=net.dtype).reshape(a["shape"])
                if arr.shape != store[i].shape:
                    raise ConfigurationError(f"checkpoint block {prefix}{i} has shape {arr.shape}")
                store[i] = arr
        return net

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> MlpGenerator:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_net(cls, net: MlpGenerator, lr: float = 1e-4, **kw) -> AdamState:
        return cls.for_params(net.params(), lr=lr, **kw)

    @classmethod
    def for_params(cls, params, lr: float = 1e-4, **kw) -> AdamState:
        return cls(
            lr=lr,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kw,
        )


def adam_update(params, grads, state: AdamState, names=None) -> None:
    """In-place Adam step on a list of arrays."""
    if len(grads) != len(params):
        raise ConfigurationError(f"{len(grads)} gradient blocks for {len(params)} parameters")
    names = names or [str(i) for i in range(len(params))]
    for name, p, g in zip(names, params, grads):
        if np.shape(g) != p.shape:
            raise ConfigurationError(f"gradient block {name} has shape {np.shape(g)}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in block {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def adam_step(net: MlpGenerator, state: AdamState, grads) -> None:
    adam_update(net.params(), grads, state, names=net.param_names())
    net.check_finite()
