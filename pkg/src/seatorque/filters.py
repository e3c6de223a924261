"""Extended Kalman filtering on the augmented SEA state.

Three estimators share this module: the augmented-state EKF that treats the
active torque as a slowly varying state (akf_step), the same filter with a
learned residual model correcting the prediction, its Jacobian, and its
process noise (gp_akf_step), and the raw spring-torque readout
(spring_torque_estimate).  All of them consume identical measurement vectors
y = [theta_m, theta_s, theta_m_dot, theta_s_dot] (H selects the first 4n
states by default).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import dynamics, gp
from .dynamics import SeaParams
from .errors import InnovationSingularError, NonFiniteStateError

Array = np.ndarray


def default_measurement_matrix(n: int) -> Array:
    """H selecting the 4n measured kinematic states out of the 5n state."""
    return np.hstack([np.eye(4 * n), np.zeros((4 * n, n))])


# Defaults identified on the reference hardware; every scenario may override.
DEFAULT_R_DIAG = (0.0461, 3.6e-6, 0.1288, 1.01e-5)
DEFAULT_Q_NOM_DIAG = (1e-1, 1e3, 1e2, 1e-9, 1e-2)
DEFAULT_P0_TORQUE = 10.0


@dataclass
class FilterConfig:
    """Static configuration of the augmented-state filter.

    q_nom is the continuous-time nominal process noise density (5n x 5n); it
    is discretized as Q_d = Q * dt alongside the first-order Jacobian
    discretization.  joseph selects the symmetrized Joseph-form covariance
    update instead of the standard (I - KH) P form.
    """

    n: int
    dt: float
    q_nom: Array
    r: Array
    h: Array = None
    p0_torque: float = DEFAULT_P0_TORQUE
    joseph: bool = False

    def __post_init__(self):
        n = self.n
        self.q_nom = self._square(self.q_nom, 5 * n, "q_nom")
        if self.h is None:
            self.h = default_measurement_matrix(n)
        self.h = np.asarray(self.h, dtype=float)
        if self.h.ndim != 2 or self.h.shape[1] != 5 * n:
            raise ValueError(f"h must have 5n = {5 * n} columns")
        self.r = self._square(self.r, self.h.shape[0], "r")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @staticmethod
    def _square(value, dim, name):
        a = np.asarray(value, dtype=float)
        if a.ndim == 1:
            a = np.diag(a)
        if a.shape != (dim, dim):
            raise ValueError(f"{name} must be ({dim}, {dim}), got {a.shape}")
        return a

    @classmethod
    def default_1dof(cls, dt: float = 0.01, **kwargs) -> "FilterConfig":
        return cls(n=1, dt=dt,
                   q_nom=kwargs.pop("q_nom", np.array(DEFAULT_Q_NOM_DIAG)),
                   r=kwargs.pop("r", np.array(DEFAULT_R_DIAG)), **kwargs)


@dataclass
class FilterState:
    """Evolving filter state: estimate, covariance, and the last GP readout."""

    x_hat: Array
    p: Array
    residual_mean: Array
    residual_var: Array


@dataclass
class StepRecord:
    """Everything one filter step produced, for logging and bound propagation."""

    t: float
    u: Array
    y: Array
    x_prior: Array
    p_prior: Array
    x_post: Array
    p_post: Array
    gain: Array
    innovation: Array
    jacobian_discrete: Array
    gp_mean: Array
    gp_var: Array

    def torque_estimate(self, n: int) -> Array:
        return self.x_post[4 * n:5 * n]


def initial_state(cfg: FilterConfig, y0: Array) -> FilterState:
    """Initialize from the first measurement: measured states copied, torque zero.

    The initial covariance uses the measurement covariance for the measured
    block and p0_torque for the torque block, a deliberately conservative
    starting uncertainty.
    """
    n = cfg.n
    y0 = np.asarray(y0, dtype=float).reshape(4 * n)
    x0 = np.concatenate([y0, np.zeros(n)])
    p0 = np.zeros((5 * n, 5 * n))
    p0[:4 * n, :4 * n] = cfg.r
    p0[4 * n:, 4 * n:] = cfg.p0_torque * np.eye(n)
    return FilterState(x_hat=x0, p=p0, residual_mean=np.zeros(n), residual_var=np.zeros(n))


def ekf_predict(cfg: FilterConfig, state: FilterState, u: Array, model, q_k: Array):
    """Generic EKF time update.

    model is a pair (step, jacobian): step(x, u) maps the state one sample
    ahead, jacobian(x, u) is the discrete state Jacobian at the linearization
    point.  q_k is the already-discretized process noise for this step.
    """
    step_fn, jac_fn = model
    x_minus = np.asarray(step_fn(state.x_hat, u), dtype=float)
    f_d = np.asarray(jac_fn(state.x_hat, u), dtype=float)
    p_minus = f_d @ state.p @ f_d.T + np.asarray(q_k, dtype=float)
    p_minus = 0.5 * (p_minus + p_minus.T)
    if not np.all(np.isfinite(x_minus)) or not np.all(np.isfinite(p_minus)):
        raise NonFiniteStateError("non-finite prediction")
    return x_minus, p_minus, f_d


def ekf_update(cfg: FilterConfig, x_minus: Array, p_minus: Array, y: Array):
    """Generic EKF measurement update; returns (x_post, p_post, gain, innovation)."""
    h = cfg.h
    y = np.asarray(y, dtype=float).reshape(h.shape[0])
    innovation = y - h @ x_minus
    s = h @ p_minus @ h.T + cfg.r
    try:
        s_factor = cho_factor(0.5 * (s + s.T), lower=True)
    except np.linalg.LinAlgError:
        raise InnovationSingularError("innovation covariance is not positive definite")
    gain = cho_solve(s_factor, h @ p_minus).T
    x_post = x_minus + gain @ innovation
    i_kh = np.eye(p_minus.shape[0]) - gain @ h
    if cfg.joseph:
        p_post = i_kh @ p_minus @ i_kh.T + gain @ cfg.r @ gain.T
    else:
        p_post = i_kh @ p_minus
    p_post = 0.5 * (p_post + p_post.T)
    return x_post, p_post, gain, innovation


def reconstruct_gp_input(params: SeaParams, x: Array, u: Array, prev_mean: Array) -> Array:
    """Rebuild the GP regressor z = [q, qd, qdd] from the augmented estimate.

    Positions and velocities come from summing motor and deflection states;
    the acceleration is the load-side balance evaluated at the estimate with
    the previous residual mean standing in for the unknown residual.
    """
    n = params.n
    tm, ts, tmd, tsd, tau = dynamics.split_augmented(x, n)
    q = tm + ts
    qd = tmd + tsd
    tau_s = dynamics.spring_torque(params, ts, tsd)
    m = params.inertia(q)
    qdd = np.linalg.solve(
        m, tau - np.asarray(prev_mean, dtype=float).reshape(n)
        - params.coriolis_grav(q, qd) - tau_s
    )
    return np.concatenate([q, qd, qdd])


def reconstruct_gp_input_batch(params: SeaParams, x: Array, u: Array, prev_mean: Array) -> Array:
    """reconstruct_gp_input applied to a (B, 5n) batch of states."""
    n = params.n
    x = np.asarray(x, dtype=float)
    tm, ts, tmd, tsd, tau = (x[:, k * n:(k + 1) * n] for k in range(5))
    q = tm + ts
    qd = tmd + tsd
    tau_s = dynamics.spring_torque_batch(params, ts, tsd)
    rhs = tau - np.asarray(prev_mean, dtype=float).reshape(1, n)
    rhs = rhs - dynamics._batch_coriolis(params, q, qd) - tau_s
    qdd = dynamics._batch_inertia_solve(params, q, rhs)
    return np.hstack([q, qd, qdd])


def gp_input_jacobian(params: SeaParams, x: Array, u: Array, prev_mean: Array) -> Array:
    """Jacobian of reconstruct_gp_input with respect to the augmented state."""
    n = params.n
    tm, ts, tmd, tsd, tau = dynamics.split_augmented(x, n)
    q = tm + ts
    qd = tmd + tsd
    sl = [slice(k * n, (k + 1) * n) for k in range(5)]
    jac = np.zeros((3 * n, 5 * n))
    i_n = np.eye(n)
    jac[0:n, sl[0]] = i_n
    jac[0:n, sl[1]] = i_n
    jac[n:2 * n, sl[2]] = i_n
    jac[n:2 * n, sl[3]] = i_n

    if params.dinertia_dq is None or params.dcoriolis_dq is None or params.dcoriolis_dqd is None:
        fd = dynamics._fd_jacobian(
            lambda xv: reconstruct_gp_input(params, xv, u, prev_mean), x, params.fd_step
        )
        jac[2 * n:3 * n, :] = fd[2 * n:3 * n, :]
        return jac

    tau_s = dynamics.spring_torque(params, ts, tsd)
    dtau_dts = dynamics.spring_stiffness_jacobian(params, ts)
    d_s = params.spring_damping
    m_inv = np.linalg.inv(params.inertia(q))
    a = tau - np.asarray(prev_mean, dtype=float).reshape(n) - params.coriolis_grav(q, qd) - tau_s
    w = m_inv @ a
    dm = np.asarray(params.dinertia_dq(q), dtype=float).reshape(n, n, n)
    p_term = -m_inv @ np.stack([dm[j] @ w for j in range(n)], axis=1)
    c_q = np.asarray(params.dcoriolis_dq(q, qd), dtype=float).reshape(n, n)
    c_qd = np.asarray(params.dcoriolis_dqd(q, qd), dtype=float).reshape(n, n)

    rows = slice(2 * n, 3 * n)
    jac[rows, sl[0]] = p_term - m_inv @ c_q
    jac[rows, sl[1]] = p_term - m_inv @ (c_q + dtau_dts)
    jac[rows, sl[2]] = -m_inv @ c_qd
    jac[rows, sl[3]] = -m_inv @ (c_qd + d_s)
    jac[rows, sl[4]] = m_inv
    return jac


def process_noise(cfg: FilterConfig, params: SeaParams, x: Array, residual_var: Array) -> Array:
    """Discretized process noise with the GP variance mapped into the state.

    Q_k = (Q_nom + S M^-1 diag(var) M^-T S^T) * dt where S embeds the load
    equation rows; with zero GP variance this reduces to the nominal term.
    """
    n = params.n
    q_cont = cfg.q_nom.copy()
    var = np.asarray(residual_var, dtype=float).reshape(n)
    if np.any(var != 0.0):
        q, _ = dynamics.load_coordinates(x, n)
        m_inv = np.linalg.inv(params.inertia(q))
        mapped = m_inv @ np.diag(var) @ m_inv.T
        sel = dynamics.torque_selector(n)
        q_cont = q_cont + sel @ mapped @ sel.T
    return q_cont * cfg.dt


def gp_akf_step(cfg: FilterConfig, params: SeaParams, state: FilterState,
                u: Array, y: Array, model: gp.MultiGp | None, t: float = 0.0):
    """One predict/update cycle of the residual-corrected augmented EKF.

    With model=None the residual mean and variance are identically zero and
    the step reduces to the plain augmented-state EKF.  Returns the new
    FilterState and a StepRecord for logging and bound propagation.
    """
    n = params.n
    z = reconstruct_gp_input(params, state.x_hat, u, state.residual_mean)
    if model is None:
        mu = np.zeros(n)
        var = np.zeros(n)
        gp_jac = np.zeros((n, 3 * n))
    else:
        mu, var = gp.multi_predict(model, z)
        gp_jac = gp.multi_mean_jacobian(model, z)

    def step_fn(xv, uv):
        return dynamics.discretize_step(params, xv, uv, mu, cfg.dt)

    def jac_fn(xv, uv):
        f_cont = dynamics.nominal_jacobian(params, xv, uv)
        if model is not None:
            q, _ = dynamics.load_coordinates(xv, n)
            m_inv = np.linalg.inv(params.inertia(q))
            z_jac = gp_input_jacobian(params, xv, uv, state.residual_mean)
            sel = dynamics.torque_selector(n)
            f_cont = f_cont - sel @ m_inv @ gp_jac @ z_jac
        return dynamics.discretize_jacobian(f_cont, cfg.dt)

    q_k = process_noise(cfg, params, state.x_hat, var)
    x_minus, p_minus, f_d = ekf_predict(cfg, state, u, (step_fn, jac_fn), q_k)
    x_post, p_post, gain, innovation = ekf_update(cfg, x_minus, p_minus, y)
    new_state = FilterState(x_hat=x_post, p=p_post, residual_mean=mu, residual_var=var)
    record = StepRecord(
        t=t, u=np.asarray(u, dtype=float).reshape(n).copy(),
        y=np.asarray(y, dtype=float).reshape(cfg.h.shape[0]).copy(),
        x_prior=x_minus, p_prior=p_minus, x_post=x_post, p_post=p_post,
        gain=gain, innovation=innovation, jacobian_discrete=f_d,
        gp_mean=mu.copy(), gp_var=var.copy(),
    )
    return new_state, record


def akf_step(cfg: FilterConfig, params: SeaParams, state: FilterState,
             u: Array, y: Array, t: float = 0.0):
    """Augmented-state EKF step without any residual model."""
    return gp_akf_step(cfg, params, state, u, y, None, t=t)


def spring_torque_estimate(params: SeaParams, theta_s: Array, theta_s_dot: Array) -> Array:
    """Torque readout straight from the measured spring deflection."""
    return dynamics.spring_torque(params, theta_s, theta_s_dot)
