"""Ellipsoidal propagation of guaranteed estimation-error bounds.

The filter's point estimate is wrapped in a two-part confidence set: an
ellipsoid of possible estimate means (tracking how bounded model errors move
the filter away from the exact linear-Gaussian case) Minkowski-summed with a
chi-square-scaled covariance ellipsoid for the Gaussian part.  Per-dimension
residual error intervals |f_i - mu_i| <= beta sigma_i enter as degenerate
ellipsoids; a sampled bound on the linearization error closes the recursion.

All ellipsoids are E(c, X) = {x : (x - c)^T X^-1 (x - c) <= 1} with X
symmetric positive semidefinite; singular directions mean zero extent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammainc

Array = np.ndarray

PSD_TOL = 1e-10


@dataclass(frozen=True)
class Ellipsoid:
    """Center and shape matrix of an ellipsoid; shape may be singular."""

    center: Array
    shape: Array

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).reshape(-1)
        shape = np.asarray(self.shape, dtype=float)
        if shape.ndim == 0:
            shape = shape.reshape(1, 1)
        if shape.shape != (center.size, center.size):
            raise ValueError("shape matrix does not match center dimension")
        shape = 0.5 * (shape + shape.T)
        eigmin = float(np.min(np.linalg.eigvalsh(shape))) if center.size else 0.0
        scale = max(float(np.max(np.abs(shape))), 1.0)
        if eigmin < -PSD_TOL * scale:
            raise ValueError(f"shape matrix has negative eigenvalue {eigmin:.3e}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "shape", shape)

    @property
    def dim(self) -> int:
        return self.center.size

    @classmethod
    def point(cls, center: Array) -> "Ellipsoid":
        center = np.asarray(center, dtype=float).reshape(-1)
        return cls(center=center, shape=np.zeros((center.size, center.size)))


def contains(e: Ellipsoid, p: Array, tol: float = 1e-9) -> bool:
    """Membership test that handles singular shape matrices.

    The offset is decomposed in the eigenbasis; components along (near-)null
    directions must vanish within tolerance, the rest must satisfy the
    quadratic form via the pseudo-inverse.
    """
    d = np.asarray(p, dtype=float).reshape(-1) - e.center
    if not np.any(e.shape):
        return bool(np.linalg.norm(d) <= tol * max(1.0, np.linalg.norm(e.center)))
    vals, vecs = np.linalg.eigh(e.shape)
    scale = float(vals[-1])
    coords = vecs.T @ d
    null = vals <= PSD_TOL * scale
    if np.any(np.abs(coords[null]) > tol * max(1.0, np.sqrt(scale))):
        return False
    quad = float(np.sum(coords[~null] ** 2 / vals[~null]))
    return quad <= 1.0 + tol


def affine_map(e: Ellipsoid, a: Array, b: Array | None = None) -> Ellipsoid:
    """Image of an ellipsoid under x -> A x + b (exact for any A)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    center = a @ e.center
    if b is not None:
        center = center + np.asarray(b, dtype=float).reshape(center.shape)
    return Ellipsoid(center=center, shape=a @ e.shape @ a.T)


def minkowski_outer(e1: Ellipsoid, e2: Ellipsoid) -> Ellipsoid:
    """Tight outer ellipsoid of the Minkowski sum of two ellipsoids.

    Shape (1 + 1/p) X1 + (1 + p) X2 with the trace-minimizing parameter
    p = sqrt(tr X1 / tr X2); degenerate operands reduce to translation.
    """
    t1 = float(np.trace(e1.shape))
    t2 = float(np.trace(e2.shape))
    center = e1.center + e2.center
    if t1 <= 0.0:
        return Ellipsoid(center=center, shape=e2.shape)
    if t2 <= 0.0:
        return Ellipsoid(center=center, shape=e1.shape)
    p = np.sqrt(t1 / t2)
    return Ellipsoid(center=center, shape=(1.0 + 1.0 / p) * e1.shape + (1.0 + p) * e2.shape)


def minkowski_contains(e1: Ellipsoid, e2: Ellipsoid, p: Array,
                       grid: int = 128, tol: float = 1e-9) -> bool:
    """Exact membership of a point in the Minkowski sum E1 + E2.

    Uses the representation of the sum as the intersection of the parametric
    outer family E(c, X1/t + X2/(1-t)), t in (0, 1): the point belongs to the
    sum iff the quadratic form stays <= 1 for every t.  Cheap sufficient
    checks against the individual operands run first.
    """
    d = np.asarray(p, dtype=float).reshape(-1) - e1.center - e2.center
    if contains(Ellipsoid(np.zeros(d.size), e1.shape), d, tol):
        return True
    if contains(Ellipsoid(np.zeros(d.size), e2.shape), d, tol):
        return True
    if not contains(minkowski_outer(Ellipsoid(np.zeros(d.size), e1.shape),
                                    Ellipsoid(np.zeros(d.size), e2.shape)), d, tol):
        return False
    ts = (np.arange(1, grid) / grid)
    shapes = e1.shape[None, :, :] / ts[:, None, None] + e2.shape[None, :, :] / (1.0 - ts)[:, None, None]
    rhs = np.broadcast_to(d, (ts.size, d.size))[..., None]
    try:
        sols = np.linalg.solve(shapes, rhs)[..., 0]
    except np.linalg.LinAlgError:
        # singular family member: fall back to the scalar test point by point
        worst = 0.0
        for t in ts:
            shape = e1.shape / t + e2.shape / (1.0 - t)
            quad = float(d @ np.linalg.lstsq(shape, d, rcond=None)[0])
            worst = max(worst, quad)
        return worst <= 1.0 + tol
    quads = np.einsum("j,ij->i", d, sols)
    return float(np.max(quads)) <= 1.0 + tol


def chi_square_scale(delta: float, dim: int) -> float:
    """Scale s with P(chi2_dim <= s) = 1 - delta, by bisecting the regularized
    incomplete gamma function."""
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must be in (0, 1)")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    target = 1.0 - delta

    def cdf(s):
        return gammainc(0.5 * dim, 0.5 * s)

    hi = 1.0
    while cdf(hi) < target:
        hi *= 2.0
        if hi > 1e12:
            raise ArithmeticError("chi-square quantile bracket failed")
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if cdf(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class GpErrorBound:
    """High-probability residual error model |f_i - mu_i| <= beta * sigma_i."""

    beta: float = 2.0

    def radii(self, sigma: Array) -> Array:
        return self.beta * np.asarray(sigma, dtype=float).reshape(-1)


def gp_error_ellipsoid(bound: GpErrorBound, mu: Array, sigma: Array) -> Ellipsoid:
    """Enclose the per-dimension residual error intervals in one ellipsoid.

    Each scalar interval [mu_i - eta_i, mu_i + eta_i] is the degenerate
    ellipsoid E(mu_i e_i, eta_i^2 e_i e_i^T); their Minkowski sum is folded
    pairwise in index order with minkowski_outer.  The result lives in the
    residual space; map_error_to_state carries it into the filter state.
    """
    mu = np.asarray(mu, dtype=float).reshape(-1)
    eta = bound.radii(sigma)
    n = mu.size
    acc = None
    for i in range(n):
        center = np.zeros(n)
        center[i] = mu[i]
        shape = np.zeros((n, n))
        shape[i, i] = eta[i] ** 2
        piece = Ellipsoid(center=center, shape=shape)
        acc = piece if acc is None else minkowski_outer(acc, piece)
    return acc


def map_error_to_state(err: Ellipsoid, m_inv: Array, n: int, dt: float) -> Ellipsoid:
    """State-space disturbance ellipsoid of a residual-space error bound.

    The residual error enters the deflection-acceleration rows through the
    load inertia; over one sample it contributes -S M^-1 (f - mu) dt, so the
    centered bound maps through A = S M^-1 dt.  The caller supplies the
    inverse inertia at the current configuration.
    """
    sel = np.zeros((5 * n, n))
    sel[3 * n:4 * n, :] = np.eye(n)
    a = sel @ (np.asarray(m_inv, dtype=float) * dt)
    centered = Ellipsoid(center=np.zeros(err.dim), shape=err.shape)
    return affine_map(centered, a)


def axis_points(e: Ellipsoid) -> Array:
    """Center plus the 2d principal-axis endpoints of an ellipsoid (rows)."""
    vals, vecs = np.linalg.eigh(e.shape)
    vals = np.clip(vals, 0.0, None)
    offsets = vecs * np.sqrt(vals)[None, :]
    pts = [e.center]
    for j in range(e.dim):
        pts.append(e.center + offsets[:, j])
        pts.append(e.center - offsets[:, j])
    return np.asarray(pts)


def linearization_error_ellipsoid(nonlinear_step, linear_step, means: Ellipsoid,
                                  covariance: Ellipsoid, safety: float = 1.5) -> Ellipsoid:
    """Sampled outer bound on the gap between a step map and its linearization.

    Evaluation points are the pairwise Minkowski combinations of the axis
    endpoints of the means ellipsoid and of the scaled covariance ellipsoid
    (center included).  Both step callables receive the whole (B, d) point
    matrix and must return a (B, d) matrix of mapped states.  Per-dimension
    maxima e_j, inflated by the safety factor, become the axis-aligned
    ellipsoid diag(d * (safety * e_j)^2), which contains the whole error box.
    """
    mean_pts = axis_points(means)
    cov_offsets = axis_points(Ellipsoid(np.zeros(covariance.dim), covariance.shape))
    points = (mean_pts[:, None, :] + cov_offsets[None, :, :]).reshape(-1, means.dim)
    gaps = np.abs(np.asarray(nonlinear_step(points)) - np.asarray(linear_step(points)))
    err = gaps.max(axis=0)
    d = means.dim
    radii = safety * err
    return Ellipsoid(center=np.zeros(d), shape=np.diag(d * radii**2))


@dataclass(frozen=True)
class ConfidenceSet:
    """Means ellipsoid + scaled covariance ellipsoid; the confidence region is
    their Minkowski sum at confidence level 1 - delta."""

    means: Ellipsoid
    covariance: Array
    scale: float
    delta: float

    def contains(self, x: Array, grid: int = 128) -> bool:
        gauss = Ellipsoid(np.zeros(self.means.dim), self.scale * self.covariance)
        return minkowski_contains(self.means, gauss, x, grid=grid)

    def torque_interval(self, n: int):
        """Per-joint torque centers and guaranteed radii (support function of
        the Minkowski sum along the torque axes)."""
        dim = self.means.dim
        centers = np.empty(n)
        radii = np.empty(n)
        for j in range(n):
            axis = np.zeros(dim)
            axis[dim - n + j] = 1.0
            centers[j] = float(self.means.center @ axis)
            radii[j] = float(
                np.sqrt(max(axis @ self.means.shape @ axis, 0.0))
                + np.sqrt(max(self.scale * (axis @ self.covariance @ axis), 0.0))
            )
        return centers, radii


def initial_confidence_set(x0: Array, p0: Array, delta: float,
                           per_coordinate: bool = False) -> ConfidenceSet:
    """Start of the recursion: a point means set around the first estimate."""
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    dim = 1 if per_coordinate else x0.size
    s = chi_square_scale(delta, dim)
    return ConfidenceSet(means=Ellipsoid.point(x0), covariance=np.asarray(p0, dtype=float),
                         scale=s, delta=delta)


def theorem1_step(cs: ConfidenceSet, *, a_d: Array, x_prior: Array, p_post: Array,
                  gain: Array, h: Array, y: Array, gp_err_state: Ellipsoid,
                  lin_err: Ellipsoid) -> ConfidenceSet:
    """One recursion step of the guaranteed-bound propagation.

    The means ellipsoid propagates through the linearized discrete model
    (center follows the filter's own prediction x_prior), absorbs the state-
    space residual-error and linearization-error ellipsoids, and contracts
    through the measurement update map x -> (I - KH) x + K y.  The Gaussian
    part is the filter covariance scaled by the (unchanged) chi-square factor.
    """
    prop = Ellipsoid(center=x_prior, shape=a_d @ cs.means.shape @ a_d.T)
    prop = minkowski_outer(prop, gp_err_state)
    prop = minkowski_outer(prop, lin_err)
    i_kh = np.eye(prop.dim) - gain @ h
    post = affine_map(prop, i_kh, gain @ np.asarray(y, dtype=float).reshape(-1))
    return ConfidenceSet(means=post, covariance=np.asarray(p_post, dtype=float),
                         scale=cs.scale, delta=cs.delta)
