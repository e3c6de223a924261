"""Closed-loop simulation of the reference rig: trajectory references, the
tracking and resistance controllers, phase execution, model training from
logged motion, estimator replay with guaranteed bounds, and Monte-Carlo
replication.

The truth rollout and the estimator replay are deliberately separated: the
controllers act on the true plant state (an idealized inner loop), so the true
trajectory does not depend on the measurement noise.  Replication then reuses
one rollout and one trained model across every run, drawing only fresh noise.
"""

from __future__ import annotations

import copy
from concurrent import futures
from dataclasses import dataclass

import numpy as np

from . import bounds, dynamics, filters, gp
from . import config as scenario_config
from .config import ScenarioSpec
from .dynamics import KinematicsSample

Array = np.ndarray


# ---------------------------------------------------------------------------
# References and controllers
# ---------------------------------------------------------------------------


def minimum_jerk(u: float):
    """Normalized smooth step 10u^3 - 15u^4 + 6u^5 and its two derivatives.

    Starts and ends with zero velocity and acceleration, so repeated legs
    join twice continuously differentiably and numerical differentiation of
    the resulting motion stays well conditioned at the junctions.
    """
    u = min(max(u, 0.0), 1.0)
    pos = u**3 * (10.0 - 15.0 * u + 6.0 * u**2)
    vel = 30.0 * u**2 * (1.0 - 2.0 * u + u**2)
    acc = 60.0 * u * (1.0 - 3.0 * u + 2.0 * u**2)
    return pos, vel, acc


@dataclass(frozen=True)
class SigmoidReference:
    """Back-and-forth smooth sweeps between two angles, holding after the last leg."""

    q_start: float
    q_end: float
    leg_duration: float
    repetitions: int

    def __call__(self, t: float):
        total = self.leg_duration * self.repetitions
        if t >= total:
            leg = self.repetitions - 1
            u = 1.0
        else:
            leg = int(t // self.leg_duration)
            u = (t - leg * self.leg_duration) / self.leg_duration
        a, b = (self.q_start, self.q_end) if leg % 2 == 0 else (self.q_end, self.q_start)
        s, sd, sdd = minimum_jerk(u)
        span = b - a
        pos = a + span * s
        vel = span * sd / self.leg_duration
        acc = span * sdd / self.leg_duration**2
        return np.array([pos]), np.array([vel]), np.array([acc])


def resistance_torque(amplitude: float, frequency: float, t) -> np.ndarray:
    """Commanded resistance profile A - A*cos(2*pi*f*t); zero at t = 0."""
    return np.atleast_1d(amplitude - amplitude * np.cos(2.0 * np.pi * frequency * t))


@dataclass
class PidController:
    """Position PID with velocity-error derivative action and a feedforward hold.

    The feedforward is the torque that balances the rig at the starting
    posture, so engaging the controller at rest produces no initial transient.
    The integral term is clamped to windup_limit in torque units.
    """

    kp: float
    ki: float
    kd: float
    feedforward: Array
    windup_limit: float = 50.0

    def __post_init__(self):
        self.feedforward = np.atleast_1d(np.asarray(self.feedforward, dtype=float))
        self.integral = np.zeros_like(self.feedforward)

    def update(self, q: Array, qd: Array, q_ref: Array, qd_ref: Array, dt: float) -> Array:
        error = q_ref - q
        self.integral = self.integral + error * dt
        if self.ki > 0.0:
            cap = self.windup_limit / self.ki
            self.integral = np.clip(self.integral, -cap, cap)
        return (
            self.feedforward
            + self.kp * error
            + self.ki * self.integral
            + self.kd * (qd_ref - qd)
        )


def static_equilibrium(params, hidden, q_hold: Array, tau_act: Array | None = None):
    """Plant rest state and holding torque at a posture.

    Solves the load-side balance for the spring torque that keeps the joint
    still under the hidden passive torques, inverts the spring law for the
    deflection, and returns ([q, 0, theta_m, 0], motor holding torque).
    """
    n = params.n
    q = np.atleast_1d(np.asarray(q_hold, dtype=float))
    tau_act = np.zeros(n) if tau_act is None else np.asarray(tau_act, dtype=float).reshape(n)
    zero = np.zeros(n)
    base = np.asarray(hidden.human_passive(q, zero, zero), dtype=float).reshape(n)
    fric = np.asarray(hidden.friction(zero), dtype=float).reshape(n)
    tau_s = tau_act + base - np.asarray(params.coriolis_grav(q, zero), dtype=float).reshape(n) - fric

    if params.spring_law == "linear":
        theta_s = np.linalg.solve(params.spring_stiffness, tau_s)
    else:
        k1 = np.diag(params.spring_stiffness)
        k3 = params.spring_cubic
        theta_s = tau_s / k1
        for _ in range(60):
            g = (k1 + k3 * theta_s**2) * theta_s - tau_s
            theta_s = theta_s - g / (k1 + 3.0 * k3 * theta_s**2)
    u_eq = -tau_s
    state = np.concatenate([q, zero, q - theta_s, zero])
    return state, u_eq


# ---------------------------------------------------------------------------
# Phase programs
# ---------------------------------------------------------------------------


@dataclass
class PhaseProgram:
    """Reference + control law + injected active torque for one phase."""

    control: callable  # (t, plant_state) -> motor torque
    tau_act: callable  # (t) -> active torque, continuous time
    pid: PidController | None


def _zero_torque(t):
    return np.zeros(1)


def build_program(spec: ScenarioSpec, phase, params, hidden, prev_pid: PidController | None) -> PhaseProgram:
    n = params.n
    h = spec.sample_dt
    ctrl = spec.controller
    if phase.controller == "pid":
        reference = SigmoidReference(phase.q_start, phase.q_end, phase.leg_duration, phase.repetitions)
        if prev_pid is not None:
            pid = prev_pid
        else:
            _, u_eq = static_equilibrium(params, hidden, np.full(n, phase.q_start))
            pid = PidController(kp=ctrl.kp, ki=ctrl.ki, kd=ctrl.kd, feedforward=u_eq)

        def control(t, s):
            q, qd = s[0:n], s[n:2 * n]
            q_ref, qd_ref, _ = reference(t)
            return pid.update(q, qd, q_ref, qd_ref, h)

        return PhaseProgram(control=control, tau_act=_zero_torque, pid=pid)

    hold = np.full(n, phase.hold_angle)
    _, u_eq = static_equilibrium(params, hidden, hold)
    if phase.controller == "hold":
        return PhaseProgram(control=lambda t, s: u_eq.copy(), tau_act=_zero_torque, pid=None)

    amp, freq = phase.torque_amplitude, phase.torque_frequency

    def control(t, s):
        return u_eq + resistance_torque(amp, freq, t)

    def tau_act(t):
        return -resistance_torque(amp, freq, t)

    return PhaseProgram(control=control, tau_act=tau_act, pid=None)


# ---------------------------------------------------------------------------
# Differentiation of logged motion
# ---------------------------------------------------------------------------


def differentiate_kinematics(times, q_seq, tm_seq, u_seq, h: float, ma_window: int, pad: int):
    """Turn padded position/torque logs into fully differentiated samples.

    All sequences carry pad extra rows on both ends; the returned samples
    cover only the core rows.  Velocities use plain central differences.
    Accelerations use central second differences smoothed by a centered
    moving average; the torque channel is smoothed with the matching kernel
    (the pairwise mean of adjacent holds, then the same moving average), so
    the inverse-dynamics balance between them holds to second order even
    though the commanded torque is piecewise constant.
    """
    if ma_window % 2 != 1 or ma_window < 1:
        raise ValueError("ma_window must be odd and >= 1")
    w2 = ma_window // 2
    if pad < w2 + 1:
        raise ValueError(f"padding {pad} too small for window {ma_window}")
    times = np.asarray(times, dtype=float)
    q_seq = np.asarray(q_seq, dtype=float)
    tm_seq = np.asarray(tm_seq, dtype=float)
    u_seq = np.asarray(u_seq, dtype=float)
    total = q_seq.shape[0]
    count = total - 2 * pad
    core = np.arange(pad, pad + count)
    offsets = range(-w2, w2 + 1)

    def central_vel(seq):
        return (seq[core + 1] - seq[core - 1]) / (2.0 * h)

    def smoothed_acc(seq):
        stacks = [
            (seq[core + o + 1] - 2.0 * seq[core + o] + seq[core + o - 1]) / h**2
            for o in offsets
        ]
        return np.mean(stacks, axis=0)

    qd = central_vel(q_seq)
    tmd = central_vel(tm_seq)
    qdd = smoothed_acc(q_seq)
    tmdd = smoothed_acc(tm_seq)
    u_eff = np.mean([0.5 * (u_seq[core + o - 1] + u_seq[core + o]) for o in offsets], axis=0)

    samples = []
    for i, k in enumerate(core):
        samples.append(KinematicsSample(
            t=float(times[k]), q=q_seq[k].copy(), qd=qd[i], qdd=qdd[i],
            theta_m=tm_seq[k].copy(), theta_m_dot=tmd[i], theta_m_ddot=tmdd[i],
            tau_m=u_eff[i],
        ))
    return samples


# ---------------------------------------------------------------------------
# Built scenario and phase execution
# ---------------------------------------------------------------------------

MA_WINDOW = 5


@dataclass
class BuiltScenario:
    spec: ScenarioSpec
    params: dynamics.SeaParams
    hidden: dynamics.HiddenResidual
    fcfg: filters.FilterConfig

    @property
    def n(self) -> int:
        return self.params.n


def build_scenario(spec: ScenarioSpec) -> BuiltScenario:
    return BuiltScenario(
        spec=spec,
        params=scenario_config.build_params(spec),
        hidden=scenario_config.build_hidden(spec),
        fcfg=scenario_config.build_filter_config(spec),
    )


def initial_rig_state(built: BuiltScenario):
    """Rest state matching the first phase's starting posture."""
    phase = built.spec.phases[0]
    angle = phase.q_start if phase.controller == "pid" else phase.hold_angle
    state, _ = static_equilibrium(built.params, built.hidden, np.full(built.n, angle))
    return state


def _advance(built: BuiltScenario, s: Array, u: Array, tau_act_fn, t: float) -> Array:
    """Advance the true plant one sample interval with ZOH motor torque."""
    dt = built.spec.sampling.plant_dt
    for i in range(built.spec.substeps):
        s = dynamics.plant_step(built.params, built.hidden, s, u, tau_act_fn(t + i * dt), dt)
    return s


@dataclass
class TrainingData:
    """Differentiated training set of one phase (before any budget eviction)."""

    phase: str
    times: Array
    inputs: Array   # (K, 3n) regressors [q, qd, qdd]
    targets: Array  # (K, n) inverse-dynamics residuals


def run_training_phase(built: BuiltScenario, phase, s: Array, prev_pid,
                       rng: np.random.Generator):
    """Roll the plant through a training phase and collect regression data.

    Records pad extra samples beyond both phase edges so every core sample has
    a full differentiation stencil; the leading pad rows replicate the rest
    state the rig held before the phase began.  Returns the training data and
    the plant/controller state at the true phase boundary.
    """
    spec = built.spec
    n = built.n
    h = spec.sample_dt
    pad = MA_WINDOW // 2 + 1
    steps = int(round(phase.duration * spec.sampling.rate_hz))
    program = build_program(spec, phase, built.params, built.hidden, prev_pid)

    _, u_hold = static_equilibrium(built.params, built.hidden, s[0:n])
    t_rows = [-(pad - i) * h for i in range(pad)]
    q_rows = [s[0:n].copy() for _ in range(pad)]
    tm_rows = [s[2 * n:3 * n].copy() for _ in range(pad)]
    u_rows = [u_hold.copy() for _ in range(pad)]

    boundary_state = None
    boundary_pid = None
    for k in range(steps + pad):
        t = k * h
        if k == steps:
            boundary_state = s.copy()
            boundary_pid = copy.deepcopy(program.pid)
        u = program.control(t, s)
        t_rows.append(t)
        q_rows.append(s[0:n].copy())
        tm_rows.append(s[2 * n:3 * n].copy())
        u_rows.append(np.asarray(u, dtype=float).reshape(n).copy())
        s = _advance(built, s, u, program.tau_act, t)
    if boundary_state is None:  # pad == 0 never happens, but stay safe
        boundary_state = s.copy()
        boundary_pid = copy.deepcopy(program.pid)

    q_seq = np.asarray(q_rows)
    tm_seq = np.asarray(tm_rows)
    noise_std = spec.noise.training_position_std
    if noise_std > 0.0:
        q_seq = q_seq + rng.normal(0.0, noise_std, size=q_seq.shape)
        tm_seq = tm_seq + rng.normal(0.0, noise_std, size=tm_seq.shape)

    samples = differentiate_kinematics(
        np.asarray(t_rows), q_seq, tm_seq, np.asarray(u_rows), h, MA_WINDOW, pad
    )
    times = np.array([smp.t for smp in samples])
    inputs = np.array([smp.gp_input() for smp in samples])
    targets = np.array([dynamics.residual_target(built.params, smp) for smp in samples])

    data = TrainingData(phase=phase.name, times=times, inputs=inputs, targets=targets)
    return data, boundary_state, boundary_pid


def finalize_model(training: list, spec: ScenarioSpec) -> gp.MultiGp:
    """Tune the kernel on the collected data, then stream it in under budget.

    Hyperparameters are fit per output dimension on a stride-thinned view no
    larger than the retention budget, with the noise scale bounded below: the
    targets come from finite differences of sampled signals, so letting the
    fit drive the noise toward zero makes the model overconfident and the
    kernel matrix nearly singular.  Tuning happens before any eviction because
    the leave-one-out scores that rank points are only meaningful once the
    kernel geometry is settled; evicting under a poor initial kernel discards
    exactly the points a good kernel would have kept.
    """
    inputs = np.concatenate([d.inputs for d in training])
    targets = np.concatenate([d.targets for d in training])
    init = scenario_config.build_gp_init(spec)
    ls_floors = np.asarray(spec.gp.lengthscale_floors, dtype=float)
    init = gp.Hyperparameters(
        sigma_f=init.sigma_f,
        lengthscales=np.maximum(init.lengthscales, ls_floors),
        sigma_noise=max(init.sigma_noise, spec.gp.noise_floor),
    )
    theta0 = init.to_vector()
    lo = theta0 - 6.0
    hi = theta0 + 6.0
    lo[-1] = max(lo[-1], np.log(spec.gp.noise_floor))
    with np.errstate(divide="ignore"):
        lo[1:-1] = np.maximum(lo[1:-1], np.log(ls_floors))

    stride = max(1, -(-inputs.shape[0] // spec.gp.budget))
    tuned = []
    for dim in range(targets.shape[1]):
        y_dim = targets[::stride, dim]
        # Keep the prior amplitude within the observed signal scale: an
        # unconstrained fit can trade a huge amplitude against very long
        # lengthscales, which extrapolates violently off the data.
        scale = 3.0 * (np.abs(y_dim).mean() + y_dim.std())
        hi_dim = hi.copy()
        if scale > 0.0:
            hi_dim[0] = min(hi_dim[0], np.log(scale))
            hi_dim[0] = max(hi_dim[0], lo[0] + 1e-6)
        init_dim = gp.Hyperparameters(
            sigma_f=float(np.clip(init.sigma_f, np.exp(lo[0]), np.exp(hi_dim[0]))),
            lengthscales=init.lengthscales,
            sigma_noise=init.sigma_noise,
        )
        tuned.append(gp.optimize_hyperparameters(
            inputs[::stride], y_dim, init_dim,
            restarts=spec.gp.restarts, iterations=spec.gp.iterations,
            seed=spec.gp.seed + dim, log_bounds=(lo, hi_dim),
        ))

    budget = spec.gp.budget
    strategy = spec.gp.eviction
    model = gp.MultiGp.from_data(inputs[:1], targets[:1], tuned)
    for z, y in zip(inputs[1:], targets[1:]):
        model = gp.multi_add_point(model, z, y)
        if model.size > budget:
            model = gp.multi_budget_evict(model, budget, strategy)
    # Refactor from scratch so the returned model carries no drift from the
    # long chain of rank-one updates.
    return gp.MultiGp(models=tuple(
        gp.condition(m.inputs, m.targets, m.hyper) for m in model.models
    ))


@dataclass
class EstimationTruth:
    """Noise-free rollout of one estimation phase, shared by every replay."""

    phase: str
    times: Array   # (K+1,)
    x_true: Array  # (K+1, 5n) [theta_m, theta_s, theta_m_dot, theta_s_dot, tau_act]
    u: Array       # (K+1, n) motor torque held over [t_k, t_{k+1})

    @property
    def tau_true(self) -> Array:
        n = self.u.shape[1]
        return self.x_true[:, 4 * n:]


def rollout_estimation_phase(built: BuiltScenario, phase, s: Array, prev_pid):
    """True trajectory, inputs, and active torque over one estimation phase."""
    spec = built.spec
    n = built.n
    h = spec.sample_dt
    steps = int(round(phase.duration * spec.sampling.rate_hz))
    program = build_program(spec, phase, built.params, built.hidden, prev_pid)

    times = np.empty(steps + 1)
    x_true = np.empty((steps + 1, 5 * n))
    u_hist = np.empty((steps + 1, n))
    for k in range(steps + 1):
        t = k * h
        q, qd, tm, tmd = (s[j * n:(j + 1) * n] for j in range(4))
        x_true[k] = np.concatenate([tm, q - tm, tmd, qd - tmd, program.tau_act(t)])
        times[k] = t
        u = np.asarray(program.control(t, s), dtype=float).reshape(n)
        u_hist[k] = u
        if k < steps:
            s = _advance(built, s, u, program.tau_act, t)

    truth = EstimationTruth(phase=phase.name, times=times, x_true=x_true, u=u_hist)
    return truth, s, copy.deepcopy(program.pid)


# ---------------------------------------------------------------------------
# Estimator replay with guaranteed bounds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundRow:
    """Per-step record of the guaranteed confidence set."""

    t: float
    torque_center: Array
    torque_radius: Array
    means_trace: float
    scale: float
    state_covered: bool
    torque_covered: bool


@dataclass(frozen=True)
class RunMetrics:
    steps: int
    rmse: dict
    covered_states: int
    covered_torques: int
    bound_rows_total: int
    mean_radius: float

    @property
    def state_coverage(self) -> float:
        return self.covered_states / self.bound_rows_total

    @property
    def torque_coverage(self) -> float:
        return self.covered_torques / self.bound_rows_total


@dataclass
class EstimationResult:
    phase: str
    truth: EstimationTruth
    y: Array
    gpakf: list
    akf: list
    spring: Array
    bound_rows: list
    metrics: RunMetrics


def synthesize_measurements(spec: ScenarioSpec, truth: EstimationTruth,
                            rng: np.random.Generator) -> Array:
    """Per-sample measurement stream [theta_m, theta_s, velocities] + noise.

    direct mode adds independent Gaussian noise per channel (the filter's
    measurement covariance can then match it exactly).  derived mode adds
    noise to the positions only and differentiates them for the velocity
    channels, which correlates the errors across time — a deliberate stress
    violation of the filter's white-noise assumption.
    """
    n = truth.u.shape[1]
    clean = truth.x_true[:, :4 * n]
    if spec.noise.mode == "direct":
        std = scenario_config.measurement_noise_std(spec)
        return clean + rng.normal(size=clean.shape) * std[None, :]

    pos = clean[:, :2 * n] + rng.normal(size=(clean.shape[0], 2 * n)) * spec.noise.position_std
    h = spec.sample_dt
    vel = np.empty_like(pos)
    vel[1:-1] = (pos[2:] - pos[:-2]) / (2.0 * h)
    vel[0] = (pos[1] - pos[0]) / h
    vel[-1] = (pos[-1] - pos[-2]) / h
    return np.hstack([pos, vel])


def _prediction_set_terms(built: BuiltScenario, model, prev_state, record, cs_prev):
    """Transition matrix and sampled curvature bound for one bound-recursion step.

    The probed map is the believed dynamics to first order in the learned
    correction: an RK4 step of the rigid model where each sampled state
    carries the step's correction shifted along the correction's local slope,
    held fixed across the internal stages exactly as the estimator holds it.
    The returned transition matrix is that map's own Jacobian at the estimate
    - the RK4 power series of the rigid-model Jacobian plus the correction
    slope entering through the stage-averaged input matrix - so the sampled
    gap measures curvature rather than slope, and cannot re-feed first-order
    growth into the set.  The learned model's error at the query itself is
    accounted for separately through its predictive standard deviation.

    Returns (a_set, lin_err, m_inv) with m_inv the load-inertia inverse at the
    previous estimate, reused by the caller to map residual-space error into
    state space.
    """
    params = built.params
    n = built.n
    dt = built.fcfg.dt
    u_prev = record.u
    prev_mean = prev_state.residual_mean
    x_hat = prev_state.x_hat
    z_hat = filters.reconstruct_gp_input(params, x_hat, u_prev, prev_mean)
    slope = gp.multi_mean_jacobian(model, z_hat)
    mu_hat = np.asarray(record.gp_mean, dtype=float).reshape(n)

    f_nom = dynamics.nominal_jacobian(params, x_hat, u_prev)
    a_nom = dynamics.rk4_discrete_jacobian(f_nom, dt)
    q_prev, _ = dynamics.load_coordinates(x_hat, n)
    m_inv = np.linalg.inv(params.inertia(q_prev))
    input_gain = -dynamics.torque_selector(n) @ m_inv
    # stage-averaged input matrix of an RK4 step with a held input:
    # dt * (I + A/2 + A^2/6 + A^3/24) B with A = F*dt
    a_f = dt * f_nom
    phi = np.eye(5 * n) + a_f / 2.0
    term = a_f / 2.0
    for k in (3.0, 4.0):
        term = term @ a_f / k
        phi = phi + term
    z_jac = filters.gp_input_jacobian(params, x_hat, u_prev, prev_mean)
    a_set = a_nom + dt * phi @ input_gain @ (slope @ z_jac)

    def nonlinear(points):
        z = filters.reconstruct_gp_input_batch(params, points, u_prev, prev_mean)
        mu = mu_hat[None, :] + (z - z_hat[None, :]) @ slope.T
        return dynamics.discretize_step_batch(params, points, u_prev, mu, dt)

    def linear(points):
        return record.x_prior[None, :] + (points - x_hat[None, :]) @ a_set.T

    gaussian = bounds.Ellipsoid(
        np.zeros(x_hat.size), cs_prev.scale * prev_state.p
    )
    lin_err = bounds.linearization_error_ellipsoid(
        nonlinear, linear, cs_prev.means, gaussian, safety=built.spec.bounds.safety
    )
    return a_set, lin_err, m_inv


def replay_estimation(built: BuiltScenario, model: gp.MultiGp, truth: EstimationTruth,
                      rng: np.random.Generator, keep_records: bool = True) -> EstimationResult:
    """Run all estimators and the bound recursion over one noisy replay."""
    spec = built.spec
    n = built.n
    cfg = built.fcfg
    bspec = spec.bounds
    y = synthesize_measurements(spec, truth, rng)
    steps = y.shape[0] - 1

    gp_state = filters.initial_state(cfg, y[0])
    akf_state = filters.initial_state(cfg, y[0])
    cs = bounds.initial_confidence_set(
        gp_state.x_hat, gp_state.p, bspec.delta, per_coordinate=bspec.per_coordinate
    )
    err_bound = bounds.GpErrorBound(beta=bspec.beta)

    spring = np.empty((steps + 1, n))
    for k in range(steps + 1):
        spring[k] = filters.spring_torque_estimate(built.params, y[k, n:2 * n], y[k, 3 * n:4 * n])

    bound_rows = []

    def bound_row(t, cs_now, x_true_k, tau_true_k):
        centers, radii = cs_now.torque_interval(n)
        state_cov = cs_now.contains(x_true_k, grid=bspec.grid)
        torque_cov = bool(np.all(np.abs(centers - tau_true_k) <= radii))
        bound_rows.append(BoundRow(
            t=float(t), torque_center=centers, torque_radius=radii,
            means_trace=float(np.trace(cs_now.means.shape)), scale=cs_now.scale,
            state_covered=bool(state_cov), torque_covered=torque_cov,
        ))

    bound_row(truth.times[0], cs, truth.x_true[0], truth.tau_true[0])

    gp_records = []
    akf_records = []
    sq_err = {"gpakf": 0.0, "akf": 0.0, "spring": 0.0}
    for k in range(1, steps + 1):
        t = float(truth.times[k])
        u_prev = truth.u[k - 1]
        prev_state = gp_state
        cs_prev = cs

        gp_state, rec = filters.gp_akf_step(cfg, built.params, gp_state, u_prev, y[k], model, t=t)
        akf_state, rec_a = filters.akf_step(cfg, built.params, akf_state, u_prev, y[k], t=t)

        a_set, lin_err, m_inv = _prediction_set_terms(built, model, prev_state, rec, cs_prev)
        gp_err_res = bounds.gp_error_ellipsoid(err_bound, rec.gp_mean, np.sqrt(rec.gp_var))
        gp_err_state = bounds.map_error_to_state(gp_err_res, m_inv, n, cfg.dt)
        cs = bounds.theorem1_step(
            cs_prev, a_d=a_set, x_prior=rec.x_prior,
            p_post=rec.p_post, gain=rec.gain, h=cfg.h, y=rec.y,
            gp_err_state=gp_err_state, lin_err=lin_err,
        )
        bound_row(t, cs, truth.x_true[k], truth.tau_true[k])

        tau_true_k = truth.tau_true[k]
        sq_err["gpakf"] += float(np.sum((rec.torque_estimate(n) - tau_true_k) ** 2))
        sq_err["akf"] += float(np.sum((rec_a.torque_estimate(n) - tau_true_k) ** 2))
        sq_err["spring"] += float(np.sum((spring[k] - tau_true_k) ** 2))
        if keep_records:
            gp_records.append(rec)
            akf_records.append(rec_a)

    rmse = {name: float(np.sqrt(val / (steps * n))) for name, val in sq_err.items()}
    metrics = RunMetrics(
        steps=steps,
        rmse=rmse,
        covered_states=sum(r.state_covered for r in bound_rows),
        covered_torques=sum(r.torque_covered for r in bound_rows),
        bound_rows_total=len(bound_rows),
        mean_radius=float(np.mean([np.mean(r.torque_radius) for r in bound_rows])),
    )
    return EstimationResult(
        phase=truth.phase, truth=truth, y=y, gpakf=gp_records, akf=akf_records,
        spring=spring, bound_rows=bound_rows, metrics=metrics,
    )


# ---------------------------------------------------------------------------
# Whole-scenario execution
# ---------------------------------------------------------------------------


@dataclass
class ScenarioResult:
    spec: ScenarioSpec
    training: list
    model: gp.MultiGp
    estimations: list


def _training_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0]))


def _estimation_rng(seed: int, run: int, phase_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 1 + run, phase_index]))


def prepare_truth(spec: ScenarioSpec, seed: int | None = None):
    """Train the model and roll out every estimation phase once.

    Returns (built, model, truths, training data).  The heavy work here is
    independent of measurement noise, so replication reuses it as-is.
    """
    seed = spec.noise.seed if seed is None else seed
    built = build_scenario(spec)
    s = initial_rig_state(built)
    pid = None
    model = None
    rng = _training_rng(seed)
    training = []
    truths = []
    pending_tuning = False
    for phase in spec.phases:
        if phase.kind == "training":
            data, s, pid = run_training_phase(built, phase, s, pid, rng)
            training.append(data)
            pending_tuning = True
        else:
            if pending_tuning:
                model = finalize_model(training, spec)
                pending_tuning = False
            truth, s, pid = rollout_estimation_phase(built, phase, s, pid)
            truths.append(truth)
    if pending_tuning:
        model = finalize_model(training, spec)
    return built, model, truths, training


def run_scenario(spec: ScenarioSpec, seed: int | None = None) -> ScenarioResult:
    """Full single run: training, tuning, and one noisy estimation replay."""
    seed = spec.noise.seed if seed is None else seed
    built, model, truths, training = prepare_truth(spec, seed)
    estimations = []
    for j, truth in enumerate(truths):
        rng = _estimation_rng(seed, 0, j)
        estimations.append(replay_estimation(built, model, truth, rng))
    return ScenarioResult(spec=spec, training=training, model=model, estimations=estimations)


# ---------------------------------------------------------------------------
# Monte-Carlo replication
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class McRun:
    run: int
    phase: str
    metrics: RunMetrics


@dataclass(frozen=True)
class McResult:
    runs: int
    seed: int
    per_run: tuple
    rmse_mean: dict
    rmse_max: dict
    state_coverage: float
    torque_coverage: float
    mean_radius: float
    total_rows: int
    covered_states: int
    covered_torques: int


def _mc_chunk(spec: ScenarioSpec, model, truths, seed: int, run_indices) -> list:
    built = build_scenario(spec)
    out = []
    for r in run_indices:
        for j, truth in enumerate(truths):
            rng = _estimation_rng(seed, r, j)
            result = replay_estimation(built, model, truth, rng, keep_records=False)
            out.append(McRun(run=r, phase=truth.phase, metrics=result.metrics))
    return out


def monte_carlo(spec: ScenarioSpec, runs: int, seed: int | None = None,
                jobs: int = 1) -> McResult:
    """Replicate the estimation replay with fresh noise; aggregate coverage.

    The true trajectory, the trained model, and the per-run seeds are all
    fixed up front, so the aggregate is identical for any job count.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    seed = spec.noise.seed if seed is None else seed
    built, model, truths, _ = prepare_truth(spec, seed)
    del built

    indices = list(range(runs))
    if jobs > 1:
        chunks = [indices[i::jobs] for i in range(jobs)]
        chunks = [c for c in chunks if c]
        results = []
        with futures.ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            for part in pool.map(_mc_chunk, *zip(*[
                (spec, model, truths, seed, chunk) for chunk in chunks
            ])):
                results.extend(part)
    else:
        results = _mc_chunk(spec, model, truths, seed, indices)
    results.sort(key=lambda mr: (mr.run, mr.phase))

    estimators = sorted(results[0].metrics.rmse)
    rmse_mean = {}
    rmse_max = {}
    for name in estimators:
        values = [mr.metrics.rmse[name] for mr in results]
        rmse_mean[name] = float(np.mean(values))
        rmse_max[name] = float(np.max(values))
    total_rows = sum(mr.metrics.bound_rows_total for mr in results)
    covered_states = sum(mr.metrics.covered_states for mr in results)
    covered_torques = sum(mr.metrics.covered_torques for mr in results)
    return McResult(
        runs=runs,
        seed=seed,
        per_run=tuple(results),
        rmse_mean=rmse_mean,
        rmse_max=rmse_max,
        state_coverage=covered_states / total_rows,
        torque_coverage=covered_torques / total_rows,
        mean_radius=float(np.mean([mr.metrics.mean_radius for mr in results])),
        total_rows=total_rows,
        covered_states=covered_states,
        covered_torques=covered_torques,
    )
