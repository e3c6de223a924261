"""Gaussian process regression with a squared-exponential kernel.

Implements exact GP regression with zero prior mean, per-dimension (ARD)
lengthscales, Cholesky-based conditioning with a jitter ladder, incremental
rank-one updates for streaming data, budget-bounded eviction, analytic mean
gradients, and marginal-likelihood hyperparameter optimization.  A residual
with several output dimensions is represented by one independent scalar GP
per output dimension sharing the same inputs (MultiGp).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .errors import FactorizationError, MalformedCsvError

Array = np.ndarray

JITTER_INIT_FACTOR = 1e-10
JITTER_MAX_FACTOR = 1e-4


@dataclass(frozen=True)
class Hyperparameters:
    """Kernel amplitude sigma_f, per-input lengthscales, observation noise std."""

    sigma_f: float
    lengthscales: Array
    sigma_noise: float

    def __post_init__(self):
        object.__setattr__(self, "lengthscales",
                           np.atleast_1d(np.asarray(self.lengthscales, dtype=float)))
        if self.sigma_f <= 0 or self.sigma_noise <= 0 or np.any(self.lengthscales <= 0):
            raise ValueError("hyperparameters must be strictly positive")

    def to_vector(self) -> Array:
        return np.concatenate([[self.sigma_f], self.lengthscales, [self.sigma_noise]])

    @classmethod
    def from_vector(cls, v: Array) -> "Hyperparameters":
        v = np.asarray(v, dtype=float)
        return cls(sigma_f=float(v[0]), lengthscales=v[1:-1].copy(), sigma_noise=float(v[-1]))


def se_kernel(hyper: Hyperparameters, x1: Array, x2: Array) -> float:
    """Squared-exponential covariance between two input points."""
    d = (np.asarray(x1, dtype=float) - np.asarray(x2, dtype=float)) / hyper.lengthscales
    return hyper.sigma_f**2 * float(np.exp(-0.5 * np.dot(d, d)))


def kernel_matrix(hyper: Hyperparameters, x1: Array, x2: Array | None = None) -> Array:
    """Dense kernel matrix between two input sets (rows are points)."""
    a = np.atleast_2d(np.asarray(x1, dtype=float)) / hyper.lengthscales
    b = a if x2 is None else np.atleast_2d(np.asarray(x2, dtype=float)) / hyper.lengthscales
    sq = (
        np.sum(a**2, axis=1)[:, None]
        + np.sum(b**2, axis=1)[None, :]
        - 2.0 * a @ b.T
    )
    return hyper.sigma_f**2 * np.exp(-0.5 * np.maximum(sq, 0.0))


@dataclass(frozen=True)
class GpModel:
    """Conditioned scalar GP: retained data plus its Cholesky factor and weights.

    chol is the lower Cholesky factor of K + sigma_noise^2 I over the retained
    inputs; alpha solves (K + sigma_noise^2 I) alpha = targets.  Instances are
    treated as immutable; add_point and budget_evict return new models.
    """

    inputs: Array
    targets: Array
    hyper: Hyperparameters
    chol: Array
    alpha: Array

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @classmethod
    def empty(cls, hyper: Hyperparameters, input_dim: int) -> "GpModel":
        """Data-free model: prior mean zero, prior variance sigma_f^2."""
        return cls(
            inputs=np.zeros((0, input_dim)),
            targets=np.zeros(0),
            hyper=hyper,
            chol=np.zeros((0, 0)),
            alpha=np.zeros(0),
        )


def _jittered_cholesky(k_noisy: Array, sigma_f: float) -> Array:
    """Lower Cholesky factor with an escalating diagonal jitter on failure."""
    try:
        return cholesky(k_noisy, lower=True)
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_INIT_FACTOR * sigma_f**2
    limit = JITTER_MAX_FACTOR * sigma_f**2
    eye = np.eye(k_noisy.shape[0])
    while jitter <= limit:
        try:
            return cholesky(k_noisy + jitter * eye, lower=True)
        except np.linalg.LinAlgError:
            jitter *= 2.0
    raise FactorizationError(
        f"kernel matrix not factorizable even with jitter {limit:.3e}"
    )


def condition(inputs: Array, targets: Array, hyper: Hyperparameters) -> GpModel:
    """Condition a GP on a batch of data (N >= 1 rows)."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    targets = np.asarray(targets, dtype=float).reshape(inputs.shape[0])
    if inputs.shape[0] < 1:
        raise ValueError("condition needs at least one data point")
    if inputs.shape[1] != hyper.lengthscales.size:
        raise ValueError("input dimension does not match lengthscale count")
    k = kernel_matrix(hyper, inputs)
    k[np.diag_indices_from(k)] += hyper.sigma_noise**2
    chol = _jittered_cholesky(k, hyper.sigma_f)
    alpha = cho_solve((chol, True), targets)
    return GpModel(inputs=inputs.copy(), targets=targets.copy(), hyper=hyper,
                   chol=chol, alpha=alpha)


def predict(model: GpModel, x: Array):
    """Posterior mean and variance at one query point.

    The variance is clamped to [0, sigma_f^2]; far from data the posterior
    reverts to the zero-mean prior with variance sigma_f^2.
    """
    mu, var = predict_batch(model, np.atleast_2d(np.asarray(x, dtype=float)))
    return float(mu[0]), float(var[0])


def predict_batch(model: GpModel, xs: Array):
    """Posterior mean and variance at a batch of query points (rows)."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    prior = model.hyper.sigma_f**2
    if model.size == 0:
        return np.zeros(xs.shape[0]), np.full(xs.shape[0], prior)
    k_star = kernel_matrix(model.hyper, model.inputs, xs)
    mu = k_star.T @ model.alpha
    v = solve_triangular(model.chol, k_star, lower=True)
    var = prior - np.sum(v * v, axis=0)
    return mu, np.clip(var, 0.0, prior)


def mean_jacobian(model: GpModel, x: Array) -> Array:
    """Gradient of the posterior mean with respect to the query point.

    d mu / d x = sum_i alpha_i dk(x_i, x)/dx with
    dk/dx = (x_i - x) / lengthscale^2 * k(x_i, x) for the SE kernel.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if model.size == 0:
        return np.zeros(x.size)
    k_star = kernel_matrix(model.hyper, model.inputs, x[None, :])[:, 0]
    diff = model.inputs - x[None, :]
    weights = model.alpha * k_star
    return (diff / model.hyper.lengthscales**2).T @ weights


def log_marginal_likelihood(model: GpModel) -> float:
    """Log marginal likelihood of the retained data under the model."""
    n = model.size
    fit = -0.5 * float(model.targets @ model.alpha)
    logdet = -float(np.sum(np.log(np.diag(model.chol))))
    return fit + logdet - 0.5 * n * np.log(2.0 * np.pi)


def lml_and_gradient(inputs: Array, targets: Array, hyper: Hyperparameters):
    """Log marginal likelihood and its gradient in log-hyperparameter space.

    Gradient entries follow the ordering of Hyperparameters.to_vector with
    each entry differentiated with respect to log(parameter); uses the trace
    identity d lml = 0.5 tr((alpha alpha^T - K^-1) dK).
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    targets = np.asarray(targets, dtype=float).reshape(inputs.shape[0])
    n, rho = inputs.shape
    k_clean = kernel_matrix(hyper, inputs)
    k_noisy = k_clean + hyper.sigma_noise**2 * np.eye(n)
    chol = _jittered_cholesky(k_noisy, hyper.sigma_f)
    alpha = cho_solve((chol, True), targets)
    lml = (
        -0.5 * float(targets @ alpha)
        - float(np.sum(np.log(np.diag(chol))))
        - 0.5 * n * np.log(2.0 * np.pi)
    )
    k_inv = cho_solve((chol, True), np.eye(n))
    w = np.outer(alpha, alpha) - k_inv

    grad = np.zeros(rho + 2)
    # d/d log sigma_f: dK = 2 K_clean
    grad[0] = float(np.sum(w * k_clean))
    for j in range(rho):
        dist = (inputs[:, j][:, None] - inputs[:, j][None, :]) ** 2
        # d/d log l_j: dK = K_clean * dist / l_j^2
        grad[1 + j] = 0.5 * float(np.sum(w * k_clean * dist)) / hyper.lengthscales[j] ** 2
    # d/d log sigma_noise: dK = 2 sigma_noise^2 I
    grad[rho + 1] = hyper.sigma_noise**2 * float(np.trace(w))
    return lml, grad


def optimize_hyperparameters(
    inputs: Array,
    targets: Array,
    init: Hyperparameters,
    restarts: int = 5,
    iterations: int = 200,
    seed: int = 0,
    log_bounds: tuple | None = None,
) -> Hyperparameters:
    """Maximize the log marginal likelihood over log-space hyperparameters.

    Runs gradient-based ascent (L-BFGS-B) from the supplied initialization
    plus restarts-1 randomized perturbations of it, and returns the best
    candidate by final likelihood.  The initialization itself is always a
    candidate, so the result never scores below it.  If every optimizer start
    fails the initialization is returned with a warning.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    targets = np.asarray(targets, dtype=float).reshape(inputs.shape[0])
    rng = np.random.default_rng(seed)
    theta0 = np.log(init.to_vector())
    if log_bounds is None:
        lo = theta0 - 6.0
        hi = theta0 + 6.0
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in log_bounds)
    bounds = list(zip(lo, hi))

    def objective(theta):
        hyper = Hyperparameters.from_vector(np.exp(theta))
        try:
            lml, grad = lml_and_gradient(inputs, targets, hyper)
        except FactorizationError:
            return np.inf, np.zeros_like(theta)
        if not np.isfinite(lml):
            return np.inf, np.zeros_like(theta)
        return -lml, -grad

    candidates = [np.clip(theta0, lo, hi)]
    for _ in range(max(restarts - 1, 0)):
        candidates.append(np.clip(theta0 + rng.uniform(-1.5, 1.5, theta0.size), lo, hi))

    best_theta, best_lml = None, -np.inf
    for theta_start in candidates:
        try:
            res = optimize.minimize(
                objective, theta_start, jac=True, method="L-BFGS-B",
                bounds=bounds, options={"maxiter": iterations},
            )
        except (ValueError, np.linalg.LinAlgError):
            continue
        if np.isfinite(res.fun) and -res.fun > best_lml:
            best_lml = -res.fun
            best_theta = res.x

    init_lml, _ = objective(np.clip(theta0, lo, hi))
    if best_theta is None or -init_lml > best_lml:
        if best_theta is None:
            warnings.warn("hyperparameter optimization failed; keeping initialization")
        return init
    return Hyperparameters.from_vector(np.exp(best_theta))


# ---------------------------------------------------------------------------
# incremental updates


def add_point(model: GpModel, x: Array, y: float) -> GpModel:
    """Append one observation via a rank-one Cholesky update (O(N^2))."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if model.size == 0:
        return condition(x, np.array([float(y)]), model.hyper)
    k_vec = kernel_matrix(model.hyper, model.inputs, x)[:, 0]
    k_self = model.hyper.sigma_f**2 + model.hyper.sigma_noise**2
    l12 = solve_triangular(model.chol, k_vec, lower=True)
    rem = k_self - float(l12 @ l12)
    floor = JITTER_INIT_FACTOR * model.hyper.sigma_f**2
    if rem < floor:
        rem = floor
    n = model.size
    chol = np.zeros((n + 1, n + 1))
    chol[:n, :n] = model.chol
    chol[n, :n] = l12
    chol[n, n] = np.sqrt(rem)
    inputs = np.vstack([model.inputs, x])
    targets = np.append(model.targets, float(y))
    alpha = cho_solve((chol, True), targets)
    return GpModel(inputs=inputs, targets=targets, hyper=model.hyper,
                   chol=chol, alpha=alpha)


def _chol_delete(chol: Array, idx: int) -> Array:
    """Cholesky factor after removing row/column idx, via Givens re-triangularization."""
    m = np.delete(chol, idx, axis=0)
    n = m.shape[0]
    for j in range(idx, n):
        a, b = m[j, j], m[j, j + 1]
        r = np.hypot(a, b)
        if r == 0.0:
            continue
        c, s = a / r, b / r
        cols = m[:, [j, j + 1]]
        m[:, j] = cols[:, 0] * c + cols[:, 1] * s
        m[:, j + 1] = -cols[:, 0] * s + cols[:, 1] * c
    m = m[:, :n]
    d = np.sign(np.diag(m))
    d[d == 0.0] = 1.0
    return m * d[None, :]


def loo_error_proxy(model: GpModel) -> Array:
    """Leave-one-out prediction error of each retained point, |alpha_i / [K^-1]_ii|."""
    inv_factor = solve_triangular(model.chol, np.eye(model.size), lower=True)
    k_inv_diag = np.sum(inv_factor**2, axis=0)
    return np.abs(model.alpha / k_inv_diag)


def budget_evict(model: GpModel, budget: int, strategy: str = "fifo") -> GpModel:
    """Drop points until at most budget remain.

    "fifo" removes the oldest point; "loo" removes the point whose removal
    least increases the leave-one-out error proxy (the most redundant one).
    """
    if strategy not in ("fifo", "loo"):
        raise ValueError(f"unknown eviction strategy {strategy!r}")
    while model.size > budget:
        idx = 0 if strategy == "fifo" else int(np.argmin(loo_error_proxy(model)))
        chol = _chol_delete(model.chol, idx)
        inputs = np.delete(model.inputs, idx, axis=0)
        targets = np.delete(model.targets, idx)
        alpha = cho_solve((chol, True), targets)
        model = GpModel(inputs=inputs, targets=targets, hyper=model.hyper,
                        chol=chol, alpha=alpha)
    return model


# ---------------------------------------------------------------------------
# multi-output wrapper


@dataclass(frozen=True)
class MultiGp:
    """Independent scalar GPs over a shared input space, one per output dim."""

    models: tuple

    @property
    def output_dim(self) -> int:
        return len(self.models)

    @property
    def size(self) -> int:
        return self.models[0].size

    @classmethod
    def from_data(cls, inputs: Array, targets: Array, hypers) -> "MultiGp":
        """Condition one GP per column of targets; hypers is one setting or a list."""
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        if targets.ndim != 2:
            raise ValueError("targets must be (N, n_out)")
        n_out = targets.shape[1]
        if isinstance(hypers, Hyperparameters):
            hypers = [hypers] * n_out
        models = tuple(condition(inputs, targets[:, j], hypers[j]) for j in range(n_out))
        return cls(models=models)


def multi_predict(multi: MultiGp, z: Array):
    """Stacked means and variances of the per-dimension GPs at one input."""
    mus, variances = [], []
    for m in multi.models:
        mu, var = predict(m, z)
        mus.append(mu)
        variances.append(var)
    return np.array(mus), np.array(variances)


def multi_predict_batch(multi: MultiGp, zs: Array):
    """Batched means/variances, shapes (batch, n_out)."""
    mus, variances = [], []
    for m in multi.models:
        mu, var = predict_batch(m, zs)
        mus.append(mu)
        variances.append(var)
    return np.column_stack(mus), np.column_stack(variances)


def multi_mean_jacobian(multi: MultiGp, z: Array) -> Array:
    """Stacked mean gradients, shape (n_out, input_dim)."""
    return np.vstack([mean_jacobian(m, z) for m in multi.models])


def multi_add_point(multi: MultiGp, z: Array, y: Array) -> MultiGp:
    y = np.asarray(y, dtype=float).reshape(multi.output_dim)
    return MultiGp(models=tuple(add_point(m, z, y[j]) for j, m in enumerate(multi.models)))


def multi_budget_evict(multi: MultiGp, budget: int, strategy: str = "fifo") -> MultiGp:
    return MultiGp(models=tuple(budget_evict(m, budget, strategy) for m in multi.models))


# ---------------------------------------------------------------------------
# dataset serialization


def save_training_csv(path, times: Array, inputs: Array, targets: Array):
    """Write a training dataset as CSV with columns t, z_1..z_rho, y_1..y_n."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if targets.shape[0] != inputs.shape[0]:
        targets = targets.T
    times = np.asarray(times, dtype=float).reshape(inputs.shape[0])
    rho, n_out = inputs.shape[1], targets.shape[1]
    header = ["t"] + [f"z_{j + 1}" for j in range(rho)] + [f"y_{j + 1}" for j in range(n_out)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(inputs.shape[0]):
            row = [times[i], *inputs[i], *targets[i]]
            writer.writerow([repr(float(v)) for v in row])


def load_training_csv(path):
    """Read a dataset written by save_training_csv; returns (t, inputs, targets)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedCsvError(f"{path}: empty file")
        z_cols = [i for i, name in enumerate(header) if name.startswith("z_")]
        y_cols = [i for i, name in enumerate(header) if name.startswith("y_")]
        if not z_cols or not y_cols or header[0] != "t":
            raise MalformedCsvError(f"{path}: header {header} is not a training dataset")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise MalformedCsvError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise MalformedCsvError(f"{path}:{lineno}: {exc}")
    data = np.asarray(rows, dtype=float)
    if data.size == 0:
        raise MalformedCsvError(f"{path}: no data rows")
    return data[:, 0], data[:, z_cols], data[:, y_cols]
