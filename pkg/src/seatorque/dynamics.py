"""Series-elastic-actuator dynamics, augmented state model, and ground-truth plant.

The model has an n-joint load side driven through compliant springs by n motors.
Load-side coordinates are q, motor-side coordinates theta_m, and the spring
deflection is theta_s = q - theta_m.  The estimator works on the augmented
state vector

    x = [theta_m, theta_s, theta_m_dot, theta_s_dot, tau_act]   (length 5n)

where tau_act is the active external torque being estimated, modeled as
constant between samples.  The plant used for ground-truth simulation carries
additional hidden dynamics (friction and a passive limb model) that the
nominal model does not know about; the gap is what the GP layer learns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NonFiniteStateError, SingularInertiaError

Array = np.ndarray

GRAVITY = 9.81


def _matrix(value, n) -> Array:
    """Coerce a scalar / vector / matrix parameter to an (n, n) array."""
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        return np.eye(n) * float(a)
    if a.ndim == 1:
        if a.shape != (n,):
            raise ValueError(f"expected length-{n} vector, got shape {a.shape}")
        return np.diag(a)
    if a.shape != (n, n):
        raise ValueError(f"expected ({n}, {n}) matrix, got shape {a.shape}")
    return a.copy()


@dataclass
class SeaParams:
    """Nominal (known) parameters of an n-joint series elastic actuator.

    inertia_load maps q to the load inertia matrix M(q); coriolis_grav maps
    (q, qd) to the lumped Coriolis/centrifugal/gravity vector of the robot
    itself.  The optional derivative callables enable the analytic Jacobian;
    when absent a central-difference fallback with step fd_step is used.
    spring_law is "linear" (tau_s = K_s theta_s + D_s theta_s_dot) or "cubic"
    (per-joint stiffening stiffness k1 + k3 * theta_s**2).
    """

    n: int
    inertia_load: Callable[[Array], Array]
    coriolis_grav: Callable[[Array, Array], Array]
    inertia_motor: Array
    damping_motor: Array
    spring_stiffness: Array
    spring_damping: Array
    spring_law: str = "linear"
    spring_cubic: Array | None = None
    dinertia_dq: Callable[[Array], Array] | None = None
    dcoriolis_dq: Callable[[Array, Array], Array] | None = None
    dcoriolis_dqd: Callable[[Array, Array], Array] | None = None
    coriolis_grav_batch: Callable[[Array, Array], Array] | None = None
    inertia_solve_batch: Callable[[Array, Array], Array] | None = None
    condition_limit: float = 1e8
    fd_step: float = 1e-6

    def __post_init__(self):
        n = self.n
        if n < 1:
            raise ValueError("n must be >= 1")
        self.inertia_motor = _matrix(self.inertia_motor, n)
        self.damping_motor = _matrix(self.damping_motor, n)
        self.spring_stiffness = _matrix(self.spring_stiffness, n)
        self.spring_damping = _matrix(self.spring_damping, n)
        if self.spring_law not in ("linear", "cubic"):
            raise ValueError(f"unknown spring_law {self.spring_law!r}")
        if self.spring_law == "cubic":
            if self.spring_cubic is None:
                raise ValueError("cubic spring law needs spring_cubic coefficients")
            self.spring_cubic = np.asarray(self.spring_cubic, dtype=float).reshape(n)
            offdiag = self.spring_stiffness - np.diag(np.diag(self.spring_stiffness))
            if np.any(offdiag != 0.0):
                raise ValueError("cubic spring law requires a diagonal stiffness matrix")

    def inertia(self, q: Array) -> Array:
        """Load inertia M(q), guarded against numerical singularity."""
        m = np.atleast_2d(np.asarray(self.inertia_load(q), dtype=float))
        cond = np.linalg.cond(m)
        if not np.isfinite(cond) or cond > self.condition_limit:
            raise SingularInertiaError(
                f"load inertia condition number {cond:.3e} exceeds limit "
                f"{self.condition_limit:.3e} at q={q}"
            )
        return m


@dataclass
class HiddenResidual:
    """Ground-truth dynamics the nominal model does not include.

    friction(qd) is the load-side friction torque (part of the robot's
    unmodeled dynamics).  human_passive(q, qd, qdd) is the passive torque a
    limb strapped to the robot applies to the load side; it must be affine in
    qdd (an inertial term) so the plant can solve for accelerations.
    """

    friction: Callable[[Array], Array]
    human_passive: Callable[[Array, Array, Array], Array]


@dataclass
class KinematicsSample:
    """One measurable snapshot of the plant (positions, derivatives, input)."""

    t: float
    q: Array
    qd: Array
    qdd: Array
    theta_m: Array
    theta_m_dot: Array
    theta_m_ddot: Array
    tau_m: Array

    def gp_input(self) -> Array:
        """Stacked GP regressor z = [q, qd, qdd]."""
        return np.concatenate([self.q, self.qd, self.qdd])


def split_augmented(x: Array, n: int):
    """Split a 5n augmented state into (theta_m, theta_s, theta_m_dot, theta_s_dot, tau_act)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (5 * n,):
        raise ValueError(f"augmented state must have shape ({5 * n},), got {x.shape}")
    return x[0:n], x[n:2 * n], x[2 * n:3 * n], x[3 * n:4 * n], x[4 * n:5 * n]


def join_augmented(theta_m, theta_s, theta_m_dot, theta_s_dot, tau_act) -> Array:
    return np.concatenate([theta_m, theta_s, theta_m_dot, theta_s_dot, tau_act])


def load_coordinates(x: Array, n: int):
    """Recover (q, qd) = (theta_s + theta_m, theta_s_dot + theta_m_dot)."""
    tm, ts, tmd, tsd, _ = split_augmented(x, n)
    return tm + ts, tmd + tsd


def torque_selector(n: int) -> Array:
    """Matrix embedding an n-vector into the theta_s_dot derivative rows of the 5n state."""
    sel = np.zeros((5 * n, n))
    sel[3 * n:4 * n, :] = np.eye(n)
    return sel


def spring_torque(params: SeaParams, theta_s: Array, theta_s_dot: Array) -> Array:
    """Spring transmission torque for the configured elasticity law."""
    theta_s = np.asarray(theta_s, dtype=float).reshape(params.n)
    theta_s_dot = np.asarray(theta_s_dot, dtype=float).reshape(params.n)
    damping = params.spring_damping @ theta_s_dot
    if params.spring_law == "linear":
        return params.spring_stiffness @ theta_s + damping
    k1 = np.diag(params.spring_stiffness)
    return (k1 + params.spring_cubic * theta_s**2) * theta_s + damping


def spring_stiffness_jacobian(params: SeaParams, theta_s: Array) -> Array:
    """d tau_s / d theta_s for the configured elasticity law."""
    if params.spring_law == "linear":
        return params.spring_stiffness.copy()
    k1 = np.diag(params.spring_stiffness)
    return np.diag(k1 + 3.0 * params.spring_cubic * np.asarray(theta_s) ** 2)


def nominal_dynamics(params: SeaParams, x: Array, u: Array, residual_mean: Array) -> Array:
    """Continuous-time augmented dynamics with the residual mean compensated.

    Returns xdot = [theta_m_dot, theta_s_dot, motor acceleration, spring
    deflection acceleration, 0].  residual_mean is the current estimate of the
    unmodeled load-side torque (zero for the purely nominal model); it enters
    the deflection acceleration through the load inertia.
    """
    n = params.n
    tm, ts, tmd, tsd, tau = split_augmented(x, n)
    u = np.asarray(u, dtype=float).reshape(n)
    residual_mean = np.asarray(residual_mean, dtype=float).reshape(n)
    q = tm + ts
    qd = tmd + tsd

    tau_s = spring_torque(params, ts, tsd)
    acc_motor = np.linalg.solve(params.inertia_motor, u + tau_s - params.damping_motor @ tmd)
    m = params.inertia(q)
    load = np.linalg.solve(m, tau - residual_mean - params.coriolis_grav(q, qd) - tau_s)
    xdot = join_augmented(tmd, tsd, acc_motor, load - acc_motor, np.zeros(n))
    if not np.all(np.isfinite(xdot)):
        raise NonFiniteStateError(f"non-finite state derivative at x={x}")
    return xdot


def _fd_jacobian(fun, x, step):
    """Central-difference Jacobian of fun at x."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        dx = np.zeros_like(x)
        dx[j] = step
        cols.append((fun(x + dx) - fun(x - dx)) / (2.0 * step))
    return np.column_stack(cols)


def nominal_jacobian(params: SeaParams, x: Array, u: Array) -> Array:
    """State Jacobian of nominal_dynamics (residual mean held constant).

    Uses closed-form blocks when the inertia/Coriolis derivative callables are
    provided, otherwise falls back to central differences with params.fd_step.
    """
    n = params.n
    have_analytic = (
        params.dinertia_dq is not None
        and params.dcoriolis_dq is not None
        and params.dcoriolis_dqd is not None
    )
    if not have_analytic:
        zero = np.zeros(n)
        return _fd_jacobian(
            lambda xv: nominal_dynamics(params, xv, u, zero), x, params.fd_step
        )

    tm, ts, tmd, tsd, tau = split_augmented(x, n)
    q = tm + ts
    qd = tmd + tsd
    tau_s = spring_torque(params, ts, tsd)
    dtau_dts = spring_stiffness_jacobian(params, ts)
    d_s = params.spring_damping
    j_inv = np.linalg.inv(params.inertia_motor)
    m = params.inertia(q)
    m_inv = np.linalg.inv(m)

    a = tau - params.coriolis_grav(q, qd) - tau_s
    w = m_inv @ a
    dm = np.asarray(params.dinertia_dq(q), dtype=float).reshape(n, n, n)
    # column j of p_term is -M^-1 (dM/dq_j) M^-1 a
    p_term = -m_inv @ np.stack([dm[j] @ w for j in range(n)], axis=1)
    c_q = np.asarray(params.dcoriolis_dq(q, qd), dtype=float).reshape(n, n)
    c_qd = np.asarray(params.dcoriolis_dqd(q, qd), dtype=float).reshape(n, n)

    f = np.zeros((5 * n, 5 * n))
    i_n = np.eye(n)
    sl = [slice(k * n, (k + 1) * n) for k in range(5)]

    f[sl[0], sl[2]] = i_n
    f[sl[1], sl[3]] = i_n

    # motor acceleration rows
    f[sl[2], sl[1]] = j_inv @ dtau_dts
    f[sl[2], sl[2]] = -j_inv @ params.damping_motor
    f[sl[2], sl[3]] = j_inv @ d_s

    # deflection acceleration rows: M^-1 a minus the motor acceleration
    f[sl[3], sl[0]] = p_term - m_inv @ c_q
    f[sl[3], sl[1]] = p_term - m_inv @ (c_q + dtau_dts) - j_inv @ dtau_dts
    f[sl[3], sl[2]] = -m_inv @ c_qd + j_inv @ params.damping_motor
    f[sl[3], sl[3]] = -m_inv @ (c_qd + d_s) - j_inv @ d_s
    f[sl[3], sl[4]] = m_inv
    return f


def rk4_step(rhs, x: Array, dt: float) -> Array:
    """One classical Runge-Kutta step of xdot = rhs(x)."""
    k1 = rhs(x)
    k2 = rhs(x + 0.5 * dt * k1)
    k3 = rhs(x + 0.5 * dt * k2)
    k4 = rhs(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def discretize_step(params: SeaParams, x: Array, u: Array, residual_mean: Array, dt: float) -> Array:
    """Discrete state prediction: one RK4 step of the residual-compensated model.

    The residual mean is held constant across the internal stages, matching a
    zero-order hold on the learned correction over the sample interval.
    """
    return rk4_step(lambda xv: nominal_dynamics(params, xv, u, residual_mean), x, dt)


def discretize_jacobian(f_cont: Array, dt: float) -> Array:
    """First-order discrete Jacobian I + F*dt of a continuous Jacobian F."""
    f_cont = np.asarray(f_cont, dtype=float)
    return np.eye(f_cont.shape[0]) + dt * f_cont


def rk4_discrete_jacobian(f_cont: Array, dt: float) -> Array:
    """Discrete Jacobian of one RK4 step of a system with Jacobian F.

    Fourth-order truncation I + A + A^2/2 + A^3/6 + A^4/24 with A = F*dt; this
    is the exact state-transition matrix of the RK4 map when F is constant, so
    the gap against the true step is pure curvature rather than integrator
    truncation.
    """
    a = dt * np.asarray(f_cont, dtype=float)
    out = np.eye(a.shape[0]) + a
    term = a
    for k in (2.0, 3.0, 4.0):
        term = term @ a / k
        out = out + term
    return out


def _batch_coriolis(params: SeaParams, q: Array, qd: Array) -> Array:
    """Coriolis/gravity torque for a (B, n) batch of configurations."""
    if params.coriolis_grav_batch is not None:
        return np.asarray(params.coriolis_grav_batch(q, qd), dtype=float).reshape(q.shape)
    return np.stack([
        np.asarray(params.coriolis_grav(q[b], qd[b]), dtype=float).reshape(params.n)
        for b in range(q.shape[0])
    ])


def _batch_inertia_solve(params: SeaParams, q: Array, rhs: Array) -> Array:
    """Solve M(q_b) w_b = rhs_b for every row of a (B, n) batch."""
    if params.inertia_solve_batch is not None:
        return np.asarray(params.inertia_solve_batch(q, rhs), dtype=float).reshape(rhs.shape)
    return np.stack([
        np.linalg.solve(params.inertia(q[b]), rhs[b]) for b in range(q.shape[0])
    ])


def spring_torque_batch(params: SeaParams, theta_s: Array, theta_s_dot: Array) -> Array:
    """spring_torque evaluated row-wise on (B, n) deflection batches."""
    theta_s = np.asarray(theta_s, dtype=float)
    theta_s_dot = np.asarray(theta_s_dot, dtype=float)
    damping = theta_s_dot @ params.spring_damping.T
    if params.spring_law == "cubic":
        k1 = np.diag(params.spring_stiffness)
        return (k1 + params.spring_cubic * theta_s**2) * theta_s + damping
    return theta_s @ params.spring_stiffness.T + damping


def nominal_dynamics_batch(params: SeaParams, x: Array, u: Array, residual_mean: Array) -> Array:
    """nominal_dynamics applied to a (B, 5n) batch of states at one input.

    residual_mean has shape (B, n): each sampled state carries its own frozen
    correction.  Used by the bound layer, which probes the prediction map at
    many states per step; the fast path relies on the optional batched plant
    callables and skips the per-state conditioning guard.
    """
    n = params.n
    x = np.asarray(x, dtype=float)
    tm, ts, tmd, tsd, tau = (x[:, k * n:(k + 1) * n] for k in range(5))
    u = np.asarray(u, dtype=float).reshape(n)
    residual_mean = np.asarray(residual_mean, dtype=float).reshape(x.shape[0], n)
    q = tm + ts
    qd = tmd + tsd

    tau_s = spring_torque_batch(params, ts, tsd)
    j_inv = np.linalg.inv(params.inertia_motor)
    acc_motor = (u[None, :] + tau_s - tmd @ params.damping_motor.T) @ j_inv.T
    load = _batch_inertia_solve(
        params, q, tau - residual_mean - _batch_coriolis(params, q, qd) - tau_s
    )
    return np.hstack([tmd, tsd, acc_motor, load - acc_motor, np.zeros_like(tau)])


def discretize_step_batch(params: SeaParams, x: Array, u: Array, residual_mean: Array, dt: float) -> Array:
    """discretize_step applied to a (B, 5n) batch with per-row frozen corrections."""
    def rhs(xv):
        return nominal_dynamics_batch(params, xv, u, residual_mean)

    k1 = rhs(x)
    k2 = rhs(x + 0.5 * dt * k1)
    k3 = rhs(x + 0.5 * dt * k2)
    k4 = rhs(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# ---------------------------------------------------------------------------
# ground-truth plant


def _passive_inertia(hidden: HiddenResidual, q: Array, qd: Array, n: int):
    """Split human_passive into (value at qdd=0, inertia H) with hp = base - H qdd."""
    base = np.asarray(hidden.human_passive(q, qd, np.zeros(n)), dtype=float).reshape(n)
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        cols.append(base - np.asarray(hidden.human_passive(q, qd, e), dtype=float).reshape(n))
    return base, np.column_stack(cols) if n else np.zeros((0, 0))


def plant_rhs(params: SeaParams, hidden: HiddenResidual, s: Array, u: Array, tau_act: Array) -> Array:
    """True plant dynamics in coordinates s = [q, qd, theta_m, theta_m_dot].

    The load side carries the hidden friction and passive limb torques on top
    of the nominal model; the passive torque's linear dependence on qdd is
    moved to the left-hand side so accelerations remain explicit.
    """
    n = params.n
    s = np.asarray(s, dtype=float)
    q, qd, tm, tmd = s[0:n], s[n:2 * n], s[2 * n:3 * n], s[3 * n:4 * n]
    u = np.asarray(u, dtype=float).reshape(n)
    tau_act = np.asarray(tau_act, dtype=float).reshape(n)

    ts = q - tm
    tsd = qd - tmd
    tau_s = spring_torque(params, ts, tsd)
    base, h_inertia = _passive_inertia(hidden, q, qd, n)
    m_eff = params.inertia(q) + h_inertia
    rhs_load = tau_act + base - params.coriolis_grav(q, qd) - hidden.friction(qd) - tau_s
    qdd = np.linalg.solve(m_eff, rhs_load)
    tmdd = np.linalg.solve(params.inertia_motor, u + tau_s - params.damping_motor @ tmd)
    out = np.concatenate([qd, qdd, tmd, tmdd])
    if not np.all(np.isfinite(out)):
        raise NonFiniteStateError("non-finite plant derivative")
    return out


def plant_step(params: SeaParams, hidden: HiddenResidual, s: Array, u: Array,
               tau_act: Array, dt: float) -> Array:
    """Advance the true plant one fixed RK4 step under zero-order-hold inputs."""
    return rk4_step(lambda sv: plant_rhs(params, hidden, sv, u, tau_act), s, dt)


def plant_sample(params: SeaParams, hidden: HiddenResidual, s: Array, u: Array,
                 tau_act: Array, t: float, noise_std: Array | None = None,
                 rng: np.random.Generator | None = None) -> KinematicsSample:
    """Exact measurable sample of the plant at its current state.

    Accelerations are recomputed from the dynamics.  When noise_std (length
    4n: position/velocity stds for q and theta_m blocks) is given, Gaussian
    noise is added to the kinematic signals.
    """
    n = params.n
    deriv = plant_rhs(params, hidden, s, u, tau_act)
    q, qd, tm, tmd = (np.array(s[k * n:(k + 1) * n]) for k in range(4))
    qdd = deriv[n:2 * n].copy()
    tmdd = deriv[3 * n:4 * n].copy()
    if noise_std is not None:
        if rng is None:
            raise ValueError("noise injection needs an rng")
        noise_std = np.asarray(noise_std, dtype=float).reshape(4 * n)
        q = q + rng.normal(0.0, noise_std[0:n])
        qd = qd + rng.normal(0.0, noise_std[n:2 * n])
        tm = tm + rng.normal(0.0, noise_std[2 * n:3 * n])
        tmd = tmd + rng.normal(0.0, noise_std[3 * n:4 * n])
    return KinematicsSample(
        t=t, q=q, qd=qd, qdd=qdd, theta_m=tm, theta_m_dot=tmd,
        theta_m_ddot=tmdd, tau_m=np.asarray(u, dtype=float).reshape(n).copy(),
    )


def residual_target(params: SeaParams, sample: KinematicsSample) -> Array:
    """Inverse-dynamics residual computed from one measurable sample.

    Subtracting every nominally modeled torque from the applied motor torque
    leaves exactly the unmodeled load-side torque when no active torque acts,
    which is the supervised target for residual learning.
    """
    m = params.inertia(sample.q)
    load_side = m @ sample.qdd + params.coriolis_grav(sample.q, sample.qd)
    motor_side = params.inertia_motor @ sample.theta_m_ddot + params.damping_motor @ sample.theta_m_dot
    return sample.tau_m - load_side - motor_side


# ---------------------------------------------------------------------------
# default single-joint models


def default_params_1dof(
    inertia_load_kgm2: float = 0.35,
    gravity_coeff_nm: float = -3.4,
    inertia_motor_kgm2: float = 0.12,
    damping_motor: float = 0.8,
    spring_stiffness: float = 120.0,
    spring_damping: float = 0.5,
    spring_law: str = "linear",
    spring_cubic: float = 0.0,
    condition_limit: float = 1e8,
) -> SeaParams:
    """Single-joint SEA with constant load inertia and a sinusoidal gravity term.

    The default gravity coefficient is negative: the link is counterbalanced
    to support the expected limb weight, a common choice on rehabilitation
    devices.  C(q, qd) = gravity_coeff_nm * sin(q).
    """
    m_const = np.array([[float(inertia_load_kgm2)]])
    g = float(gravity_coeff_nm)
    return SeaParams(
        n=1,
        inertia_load=lambda q: m_const,
        coriolis_grav=lambda q, qd: np.array([g * np.sin(q[0])]),
        inertia_motor=inertia_motor_kgm2,
        damping_motor=damping_motor,
        spring_stiffness=spring_stiffness,
        spring_damping=spring_damping,
        spring_law=spring_law,
        spring_cubic=None if spring_law == "linear" else np.array([spring_cubic]),
        dinertia_dq=lambda q: np.zeros((1, 1, 1)),
        dcoriolis_dq=lambda q, qd: np.array([[g * np.cos(q[0])]]),
        dcoriolis_dqd=lambda q, qd: np.zeros((1, 1)),
        coriolis_grav_batch=lambda q, qd: g * np.sin(q),
        inertia_solve_batch=lambda q, rhs: rhs / m_const[0, 0],
        condition_limit=condition_limit,
    )


def default_hidden_1dof(
    coulomb_nm: float = 0.2,
    coulomb_width: float = 0.01,
    viscous: float = 0.3,
    arm_mass_kg: float = 1.5,
    arm_length_m: float = 0.25,
    arm_damping: float = 0.3,
    arm_stiffness: float = 1.2,
    arm_rest_angle_rad: float = 0.7065,
) -> HiddenResidual:
    """Hidden plant dynamics: smoothed Coulomb + viscous friction and a
    one-segment passive limb (inertia, gravity, viscoelasticity).

    The default viscoelastic rest angle sits near mid-range, where a relaxed
    elbow naturally hangs; together with the default stiffness it balances the
    limb weight at the 10 degree home posture, so the residual torque starts
    near zero and grows to several N.m across the workspace.
    """
    inertia = arm_mass_kg * arm_length_m**2
    grav = arm_mass_kg * GRAVITY * arm_length_m

    def friction(qd):
        qd = np.asarray(qd, dtype=float)
        return coulomb_nm * np.tanh(qd / coulomb_width) + viscous * qd

    def human_passive(q, qd, qdd):
        q = np.asarray(q, dtype=float)
        return -(
            inertia * np.asarray(qdd, dtype=float)
            + grav * np.sin(q)
            + arm_damping * np.asarray(qd, dtype=float)
            + arm_stiffness * (q - arm_rest_angle_rad)
        )

    return HiddenResidual(friction=friction, human_passive=human_passive)


def zero_hidden(n: int) -> HiddenResidual:
    """Hidden dynamics that are identically zero (plant equals nominal model)."""
    return HiddenResidual(friction=lambda qd: np.zeros(n),
                          human_passive=lambda q, qd, qdd: np.zeros(n))


def true_residual(hidden: HiddenResidual, q: Array, qd: Array, qdd: Array) -> Array:
    """Ground-truth residual friction(qd) - human_passive(q, qd, qdd)."""
    return np.asarray(hidden.friction(qd), dtype=float) - np.asarray(
        hidden.human_passive(q, qd, qdd), dtype=float
    )
