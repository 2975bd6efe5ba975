"""Linear structural equation model X = B X + eps and its three estimators.

``B`` is strictly lower triangular and eps ~ N(0, I). Engression fits the
whole map eps -> (I - B)^{-1} eps with the energy loss; RML fits one
coordinate per step of the dimension-drop bridge; MLE is row-wise least
squares.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import ndtr

from rml.errors import ConfigurationError, InsufficientSamplesError
from rml.scoring import as_batch

METHODS = ("engression", "rml", "mle")
_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class SemSpec:
    B: np.ndarray

    def __post_init__(self):
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if B.ndim != 2 or B.shape[0] != B.shape[1]:
            raise ConfigurationError(f"adjacency must be square, got shape {B.shape}")
        if np.any(np.triu(B) != 0):
            raise ConfigurationError("adjacency must be strictly lower triangular")
        object.__setattr__(self, "B", B)

    @property
    def d(self) -> int:
        return self.B.shape[0]

    @classmethod
    def zero(cls, d: int) -> SemSpec:
        return cls(np.zeros((d, d)))

    @classmethod
    def random(cls, d: int, rng: np.random.Generator, low: float = -1.0, high: float = 1.0) -> SemSpec:
        B = np.zeros((d, d))
        rows, cols = np.tril_indices(d, -1)
        B[rows, cols] = rng.uniform(low, high, size=rows.size)
        return cls(B)


def free_entries(d: int) -> tuple[np.ndarray, np.ndarray]:
    return np.tril_indices(d, -1)


def sem_sample(spec: SemSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """n rows of X = (I - B)^{-1} eps."""
    eps = rng.standard_normal((n, spec.d))
    return solve_triangular(np.eye(spec.d) - spec.B, eps.T, lower=True, unit_diagonal=True).T


def _check_data(data) -> np.ndarray:
    x = as_batch(data)
    n, d = x.shape
    if n <= d:
        raise InsufficientSamplesError(f"need n > d, got n={n}, d={d}")
    return x


@dataclass
class FitInfo:
    converged: bool = True
    iterations: int = 0
    notes: list[str] = field(default_factory=list)


# -- MLE ---------------------------------------------------------------------


def estimate_mle(data) -> np.ndarray:
    """Row-wise least squares through the origin."""
    x = _check_data(data)
    d = x.shape[1]
    B = np.zeros((d, d))
    gram = x.T @ x
    for k in range(1, d):
        G = gram[:k, :k]
        try:
            c = np.linalg.cholesky(G)
        except np.linalg.LinAlgError:
            raise ConfigurationError(f"singular Gram matrix for coordinate {k}") from None
        if np.min(np.diag(c)) ** 2 < 1e-12 * max(np.max(np.diag(G)), 1e-300):
            raise ConfigurationError(f"singular Gram matrix for coordinate {k}")
        B[k, :k] = np.linalg.solve(G, gram[:k, k])
    return B


# -- RML ---------------------------------------------------------------------


def rho(u) -> np.ndarray:
    """E|u - eps| for eps ~ N(0, 1)."""
    u = np.asarray(u, dtype=float)
    return u * (2.0 * ndtr(u) - 1.0) + 2.0 * np.exp(-0.5 * u * u) / _SQRT_2PI


def rml_step_loss(b, z, target) -> float:
    """Per-step energy loss mean rho(x_k - b'z), up to the constant repulsion term."""
    return float(np.mean(rho(target - z @ np.asarray(b, dtype=float))))


def rml_step_gradient(b, z, target) -> np.ndarray:
    u = target - z @ np.asarray(b, dtype=float)
    return -(z * (2.0 * ndtr(u) - 1.0)[:, None]).mean(axis=0)


def _rml_step_hessian(b, z, target) -> np.ndarray:
    u = target - z @ b
    w = 2.0 * np.exp(-0.5 * u * u) / _SQRT_2PI
    return (z * w[:, None]).T @ z / z.shape[0]


def estimate_rml(data, max_iter: int = 100, tol: float = 1e-10, info: FitInfo | None = None) -> np.ndarray:
    """Per-step minimizers of mean rho(x_k - b_k'x_{1:k-1}).

    Damped Newton from the least-squares start; the objective is smooth and
    convex so this reaches the minimizer in a handful of steps. Failure to
    meet ``tol`` is recorded in ``info`` rather than raised.
    """
    x = _check_data(data)
    d = x.shape[1]
    info = info if info is not None else FitInfo()
    B = estimate_mle(x)
    for k in range(1, d):
        z, target = x[:, :k], x[:, k]
        b = B[k, :k].copy()
        f = rml_step_loss(b, z, target)
        done = False
        for it in range(max_iter):
            g = rml_step_gradient(b, z, target)
            if np.linalg.norm(g) < tol:
                done = True
                break
            H = _rml_step_hessian(b, z, target)
            step = np.linalg.lstsq(H, g, rcond=None)[0]
            a = 1.0
            while True:
                nb = b - a * step
                nf = rml_step_loss(nb, z, target)
                if nf <= f or a < 1e-10:
                    break
                a *= 0.5
            if a < 1e-10:
                done = np.linalg.norm(g) < 1e3 * tol
                break
            b, f = nb, nf
            info.iterations += 1
        if not done:
            info.converged = False
            info.notes.append(f"rml coordinate {k} stopped at |grad|={np.linalg.norm(g):.3g}")
        B[k, :k] = b
    return B


# -- engression --------------------------------------------------------------


def _mixing(B: np.ndarray) -> np.ndarray:
    d = B.shape[0]
    return solve_triangular(np.eye(d) - B, np.eye(d), lower=True, unit_diagonal=True)


def engression_sem_loss(B, x, eps, eps2) -> float:
    """Monte Carlo engression loss at B: one (eps, eps') pair per row of x."""
    M = _mixing(np.asarray(B, dtype=float))
    x = as_batch(x)
    z = eps @ M.T
    z2 = eps2 @ M.T
    return float(np.mean(np.linalg.norm(x - z, axis=1)) - 0.5 * np.mean(np.linalg.norm(z - z2, axis=1)))


def _unit_rows(r: np.ndarray) -> np.ndarray:
    # zero rows stay zero: subgradient 0 at the kink
    norm = np.sqrt(np.einsum("ij,ij->i", r, r))
    return r / np.maximum(norm, np.finfo(float).tiny)[:, None]


def engression_sem_gradient(B, x, eps, eps2, chunk: int = 1 << 15) -> np.ndarray:
    """Gradient of :func:`engression_sem_loss` over the free lower triangle."""
    B = np.asarray(B, dtype=float)
    M = _mixing(B)
    d = B.shape[0]
    # d||x - M e|| / dB = -M'u (M e)', d||M de|| / dB = M'v (M de)'
    acc = np.zeros((d, d))
    for lo in range(0, x.shape[0], chunk):
        hi = lo + chunk
        z = eps[lo:hi] @ M.T
        delta = z - eps2[lo:hi] @ M.T
        acc -= _unit_rows(x[lo:hi] - z).T @ z
        acc -= 0.5 * _unit_rows(delta).T @ delta
    G = M.T @ acc / x.shape[0]
    return G[free_entries(d)]


# Nodes in s = log t for ||z|| = (1 / (2 sqrt(pi))) int_0^inf (1 - exp(-t ||z||^2)) t^(-3/2) dt.
# In s the integrand is analytic in a strip of half-width pi and decays at both
# ends, so the trapezoid rule converges geometrically in the node spacing.
_LOG_T = np.linspace(-40.0, 40.0, 161)
_LOG_T_W = np.full(_LOG_T.size, _LOG_T[1] - _LOG_T[0])
_LOG_T_W[[0, -1]] *= 0.5
_NORM_C = 0.5 / np.sqrt(np.pi)


def expected_norm(x, sigma, scale: float, grad: bool = False):
    """Mean over rows of E||x_i - z|| for z ~ N(0, sigma), by quadrature.

    Uses E exp(-t ||x - z||^2) = det(A)^(-1/2) exp(-t x'A^{-1}x) with
    A = I + 2t sigma. Nodes sit at t = e^s / scale, so ``scale`` should be of
    the order of ||x||^2; the value does not depend on it beyond quadrature
    error. With ``grad`` the derivative with respect to sigma is returned too.
    """
    x = as_batch(x)
    n, d = x.shape
    lam, U = np.linalg.eigh(0.5 * (sigma + sigma.T))
    lam = np.maximum(lam, 0.0)
    w = x @ U
    w2 = w * w
    t = np.exp(_LOG_T) / scale
    tl = 2.0 * np.outer(t, lam)
    inv = 1.0 / (1.0 + tl)
    # log1p: at the smallest nodes 1 + 2t*lam rounds to 1
    log_phi = -0.5 * np.log1p(tl).sum(axis=1) - t * (w2 @ inv.T)
    wt = _LOG_T_W / np.sqrt(t)
    # first-order tail below t[0], exact tail above t[-1]
    low, high = 2.0 * np.sqrt(t[0]), 2.0 / np.sqrt(t[-1])
    a = float(np.mean(w2.sum(axis=1))) + lam.sum()
    value = _NORM_C * (float(np.mean(-np.expm1(log_phi) @ wt)) + a * low + high)
    if not grad:
        return value
    # d(1 - phi)/d sigma = phi (t A^-1 - 2 t^2 A^-1 x x' A^-1); A^-1 = diag(inv) in the eigenbasis
    phi = np.exp(log_phi)
    mean_phi = phi.mean(axis=0)
    outer = ((phi.T @ (w[:, :, None] * w[:, None, :]).reshape(n, d * d)) / n).reshape(-1, d, d)
    G = np.einsum("k,kj->j", wt * t * mean_phi, inv)
    G = np.diag(G) - 2.0 * np.einsum("k,kj,kjl,kl->jl", wt * t * t, inv, outer, inv)
    G = _NORM_C * (G + low * np.eye(d))
    return value, U @ G @ U.T


def _exact_scale(x: np.ndarray) -> float:
    return max(float(np.mean(np.einsum("ij,ij->i", x, x))), 1e-300)


def engression_exact_loss(B, x, scale: float | None = None, grad: bool = False):
    """Engression loss at B with the expectation over the noise done exactly.

    E||x - M eps|| - 0.5 E||M (eps - eps')|| averaged over rows, where
    M = (I - B)^{-1}; M eps ~ N(0, MM') and M(eps - eps') ~ N(0, 2MM').
    With ``grad`` the gradient over the free lower triangle is returned too.
    """
    B = np.asarray(B, dtype=float)
    x = as_batch(x)
    d = B.shape[0]
    scale = _exact_scale(x) if scale is None else scale
    M = _mixing(B)
    S = M @ M.T
    zero = np.zeros((1, d))
    if not grad:
        return expected_norm(x, S, scale) - 0.5 * expected_norm(zero, 2.0 * S, scale)
    f1, G1 = expected_norm(x, S, scale, grad=True)
    f2, G2 = expected_norm(zero, 2.0 * S, scale, grad=True)
    G = G1 - G2
    # dS = dM M' + M dM', dM = M dB M
    dB = M.T @ (2.0 * G @ M) @ M.T
    return f1 - 0.5 * f2, dB[free_entries(d)]


@dataclass
class EngressionConfig:
    """Newton settings for :func:`estimate_engression`.

    The Hessian is a central difference of the exact gradient with step
    ``fd_step``; iteration stops once the Newton decrement falls below
    ``tol``.
    """

    max_iter: int = 50
    tol: float = 1e-14
    fd_step: float = 1e-5

    def __post_init__(self):
        if self.max_iter < 1:
            raise ConfigurationError(f"max_iter must be >= 1, got {self.max_iter}")
        if not (self.tol > 0 and self.fd_step > 0):
            raise ConfigurationError("tol and fd_step must be positive")


def _theta_to_B(theta: np.ndarray, d: int) -> np.ndarray:
    B = np.zeros((d, d))
    B[free_entries(d)] = theta
    return B


def _newton_direction(H, g) -> np.ndarray:
    # eigenvalue floor keeps the direction a descent direction off the convex region
    w, V = np.linalg.eigh(H)
    w = np.maximum(np.abs(w), 1e-6 * max(np.abs(w).max(), 1e-12))
    return V @ ((V.T @ g) / w)


def estimate_engression(
    data,
    cfg: EngressionConfig | None = None,
    info: FitInfo | None = None,
) -> np.ndarray:
    """Minimize the engression loss over strictly lower-triangular B.

    The generator eps -> (I - B)^{-1} eps is Gaussian, so the expectation
    over its noise is taken exactly (:func:`engression_exact_loss`) and the
    estimate carries no Monte Carlo error. The loss is smooth but badly
    conditioned, so the minimizer is found by damped Newton started from
    least squares, which is consistent for the same B.
    """
    x = _check_data(data)
    cfg = cfg or EngressionConfig()
    info = info if info is not None else FitInfo()
    d = x.shape[1]
    idx = free_entries(d)
    scale = _exact_scale(x)
    theta = estimate_mle(x)[idx]

    def loss(th, grad=False):
        return engression_exact_loss(_theta_to_B(th, d), x, scale, grad)

    f, g = loss(theta, grad=True)
    for _ in range(cfg.max_iter):
        H = np.empty((theta.size, theta.size))
        for j in range(theta.size):
            e = np.zeros(theta.size)
            e[j] = cfg.fd_step
            H[:, j] = (loss(theta + e, True)[1] - loss(theta - e, True)[1]) / (2 * cfg.fd_step)
        direction = _newton_direction(0.5 * (H + H.T), g)
        decrement = float(g @ direction)
        if decrement < cfg.tol:
            return _theta_to_B(theta, d)
        a = 1.0
        while a > 1e-10:
            cand = theta - a * direction
            fc = loss(cand)
            if fc <= f - 1e-4 * a * decrement:
                break
            a *= 0.5
        else:
            break
        theta = cand
        f, g = loss(theta, grad=True)
        info.iterations += 1
    info.converged = False
    info.notes.append(f"engression Newton stopped with decrement {decrement:.3g}")
    return _theta_to_B(theta, d)


# -- theory and study harness ------------------------------------------------


def asymptotic_variance(method: str, spec: SemSpec) -> float:
    """Trace of the asymptotic covariance of sqrt(n)(B_hat - B)."""
    if method not in ("rml", "mle"):
        raise ConfigurationError(f"no closed form for method {method!r}; use 'rml' or 'mle'")
    d = spec.d
    B = spec.B
    extra = 0.0
    # rows i = 2..d-1 in one-based indexing
    for i in range(1, d - 1):
        extra += (d - 1 - i) * float(np.sum(B[i, :i] ** 2))
    base = d * (d - 1) / 2 + extra
    return base * np.pi / 3 if method == "rml" else base


ESTIMATORS = {
    "mle": lambda x, rng, info: estimate_mle(x),
    "rml": lambda x, rng, info: estimate_rml(x, info=info),
    "engression": lambda x, rng, info: estimate_engression(x, info=info),
}


@dataclass
class EstimationRow:
    method: str
    d: int
    n: int
    replication_count: int
    bias_sq_sum: float
    variance_sum: float
    ratio_vs_mle: float
    flagged: int = 0


@dataclass
class EstimationReport:
    rows: list[EstimationRow]
    estimates: dict = field(default_factory=dict)

    columns = ("method", "d", "n", "replication_count", "bias_sq_sum", "variance_sum", "ratio_vs_mle")

    def get(self, method: str, n: int) -> EstimationRow:
        for r in self.rows:
            if r.method == method and r.n == n:
                return r
        raise KeyError((method, n))

    def records(self) -> list[dict]:
        return [{c: getattr(r, c) for c in self.columns} for r in self.rows]


def summarize(estimates: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """(sum of squared biases, sum of variances) over the free entries.

    ``estimates`` has shape (replications, d, d). Variance uses ddof=0 so a
    single replication gives exactly zero.
    """
    d = truth.shape[0]
    idx = free_entries(d)
    est = np.asarray(estimates)[:, idx[0], idx[1]]
    bias = est.mean(axis=0) - truth[idx]
    return float(np.sum(bias**2)), float(np.sum(est.var(axis=0)))


def _replicate(spec, n, methods, seed_seq):
    rng = np.random.default_rng(seed_seq)
    x = sem_sample(spec, n, rng)
    out, flags = {}, {}
    for m in methods:
        info = FitInfo()
        out[m] = ESTIMATORS[m](x, rng, info)
        flags[m] = not info.converged
    return out, flags


def efficiency_study(
    spec: SemSpec,
    ns,
    replications: int,
    rng: np.random.Generator | int,
    methods=METHODS,
    threads: int = 1,
) -> EstimationReport:
    """Bias and variance of each estimator over independent replications."""
    if replications < 1:
        raise ConfigurationError("replications must be >= 1")
    for m in methods:
        if m not in ESTIMATORS:
            raise ConfigurationError(f"unknown method {m!r}")
    root = np.random.SeedSequence(rng if isinstance(rng, int) else int(rng.integers(2**63)))
    rows, store = [], {}
    for n, child in zip(ns, root.spawn(len(ns))):
        seeds = child.spawn(replications)
        results = _map(lambda s: _replicate(spec, int(n), methods, s), seeds, threads)
        summary = {}
        for m in methods:
            est = np.stack([r[0][m] for r in results])
            store[(m, int(n))] = est
            flagged = sum(r[1][m] for r in results)
            summary[m] = (*summarize(est, spec.B), flagged)
        ref = summary.get("mle", (None, None, 0))[1]
        for m in methods:
            b2, v, fl = summary[m]
            ratio = v / ref if ref else float("nan")
            rows.append(EstimationRow(m, spec.d, int(n), replications, b2, v, ratio, fl))
    return EstimationReport(rows, store)


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(i) for i in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
