"""Scenario files: parsing, validation, and construction of runnable objects.

A scenario file is an INI document (extension ``.toy``) describing one
simulated rig end to end: plant constants, the hidden dynamics the estimators
never see, sampling rates, sensor noise, controller gains, filter tuning, GP
settings, bound settings, and an ordered list of phases.  The parsed
ScenarioSpec is a tree of frozen dataclasses holding plain values only, so it
pickles cleanly across worker processes; the build_* helpers turn it into the
callable-bearing objects the simulation consumes.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import dynamics, filters, gp
from .errors import ConfigError

PHASE_PREFIX = "phase."
SCENARIO_SUFFIX = ".toy"


# ---------------------------------------------------------------------------
# Spec dataclasses (plain values only; picklable)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlantSpec:
    joints: int = 1
    load_inertia: float = 0.35
    gravity_coeff: float = -3.4
    motor_inertia: float = 0.12
    motor_damping: float = 0.8
    spring_law: str = "linear"
    spring_stiffness: float = 120.0
    spring_cubic: float = 0.0
    spring_damping: float = 0.5
    condition_limit: float = 1e8


@dataclass(frozen=True)
class HiddenSpec:
    enabled: bool = True
    coulomb: float = 0.2
    coulomb_width: float = 0.01
    viscous: float = 0.3
    arm_mass: float = 1.5
    arm_length: float = 0.25
    arm_damping: float = 0.3
    arm_stiffness: float = 1.2
    arm_rest_angle: float = 0.7065


@dataclass(frozen=True)
class SamplingSpec:
    rate_hz: float = 100.0
    plant_dt: float = 1e-3


@dataclass(frozen=True)
class NoiseSpec:
    seed: int = 0
    mode: str = "direct"
    position_std: float = 5e-4
    velocity_std: float = 2e-3
    training_position_std: float = 0.0


@dataclass(frozen=True)
class ControllerSpec:
    kp: float = 80.0
    ki: float = 20.0
    kd: float = 5.0


@dataclass(frozen=True)
class FilterSpec:
    r_diag: tuple | None = None  # None: derive from the injected noise levels
    q_nom_diag: tuple = filters.DEFAULT_Q_NOM_DIAG
    p0_torque: float = filters.DEFAULT_P0_TORQUE
    joseph: bool = False


@dataclass(frozen=True)
class GpSpec:
    budget: int = 600
    eviction: str = "fifo"
    init_sigma_f: float = 2.0
    init_lengthscales: tuple = (0.5, 0.5, 2.0)
    init_sigma_noise: float = 0.01
    noise_floor: float = 1e-4
    lengthscale_floors: tuple = (0.0, 0.0, 0.0)
    restarts: int = 5
    iterations: int = 200
    seed: int = 7


@dataclass(frozen=True)
class BoundsSpec:
    delta: float = 0.05
    beta: float = 2.0
    safety: float = 1.5
    per_coordinate: bool = False
    grid: int = 128


@dataclass(frozen=True)
class PhaseSpec:
    name: str
    kind: str  # training | estimation
    duration: float
    controller: str  # pid | hold | resist
    q_start: float = 0.0
    q_end: float = 0.0
    leg_duration: float = 1.0
    repetitions: int = 1
    hold_angle: float = 0.0
    torque_amplitude: float = 2.0
    torque_frequency: float = 0.1
    active_torque: str = "zero"  # zero | resist


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    plant: PlantSpec = field(default_factory=PlantSpec)
    hidden: HiddenSpec = field(default_factory=HiddenSpec)
    sampling: SamplingSpec = field(default_factory=SamplingSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    controller: ControllerSpec = field(default_factory=ControllerSpec)
    filt: FilterSpec = field(default_factory=FilterSpec)
    gp: GpSpec = field(default_factory=GpSpec)
    bounds: BoundsSpec = field(default_factory=BoundsSpec)
    phases: tuple = ()

    @property
    def substeps(self) -> int:
        return int(round(1.0 / (self.sampling.rate_hz * self.sampling.plant_dt)))

    @property
    def sample_dt(self) -> float:
        return 1.0 / self.sampling.rate_hz


# ---------------------------------------------------------------------------
# INI parsing
# ---------------------------------------------------------------------------


class _SectionReader:
    """Typed accessors over one INI section with precise error messages."""

    def __init__(self, parser: configparser.ConfigParser, section: str, path: str):
        self._parser = parser
        self._section = section
        self._path = path
        self._seen: set[str] = set()

    def _raw(self, key: str, default):
        self._seen.add(key)
        if not self._parser.has_option(self._section, key):
            if default is _REQUIRED:
                raise ConfigError(
                    f"{self._path}: [{self._section}] is missing required key '{key}'"
                )
            return None
        return self._parser.get(self._section, key)

    def _fail(self, key: str, message: str):
        raise ConfigError(f"{self._path}: [{self._section}] {key}: {message}")

    def floatval(self, key: str, default, positive: bool = False, nonneg: bool = False):
        raw = self._raw(key, default)
        if raw is None:
            return default
        try:
            value = float(raw)
        except ValueError:
            self._fail(key, f"expected a number, got {raw!r}")
        if not np.isfinite(value):
            self._fail(key, "must be finite")
        if positive and value <= 0:
            self._fail(key, f"must be > 0, got {value}")
        if nonneg and value < 0:
            self._fail(key, f"must be >= 0, got {value}")
        return value

    def intval(self, key: str, default, positive: bool = False):
        raw = self._raw(key, default)
        if raw is None:
            return default
        try:
            value = int(raw)
        except ValueError:
            self._fail(key, f"expected an integer, got {raw!r}")
        if positive and value <= 0:
            self._fail(key, f"must be > 0, got {value}")
        return value

    def boolval(self, key: str, default):
        raw = self._raw(key, default)
        if raw is None:
            return default
        lowered = str(raw).strip().lower()
        if lowered in ("true", "yes", "on", "1"):
            return True
        if lowered in ("false", "no", "off", "0"):
            return False
        self._fail(key, f"expected true/false, got {raw!r}")

    def choice(self, key: str, default, allowed):
        raw = self._raw(key, default)
        if raw is None:
            return default
        value = str(raw).strip().lower()
        if value not in allowed:
            self._fail(key, f"must be one of {sorted(allowed)}, got {raw!r}")
        return value

    def floats(self, key: str, default, count: int | None = None, positive: bool = False):
        raw = self._raw(key, default)
        if raw is None:
            return default
        parts = str(raw).replace(",", " ").split()
        try:
            values = tuple(float(p) for p in parts)
        except ValueError:
            self._fail(key, f"expected a list of numbers, got {raw!r}")
        if count is not None and len(values) != count:
            self._fail(key, f"expected {count} values, got {len(values)}")
        if positive and any(v <= 0 for v in values):
            self._fail(key, "all values must be > 0")
        return values

    def reject_unknown(self):
        if not self._parser.has_section(self._section):
            return
        for key in self._parser.options(self._section):
            if key not in self._seen:
                self._fail(key, "unknown key")


_REQUIRED = object()


def _reader(parser, section, path) -> _SectionReader:
    return _SectionReader(parser, section, path)


def parse_scenario(path) -> ScenarioSpec:
    """Parse and validate a scenario file; raises ConfigError on any problem."""
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys carry unit suffixes; keep their case
    try:
        with open(path, "r", encoding="utf-8") as handle:
            parser.read_file(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: malformed scenario file: {exc}") from exc
    where = str(path)

    known = {"plant", "hidden", "sampling", "noise", "controller", "filter", "gp", "bounds"}
    for section in parser.sections():
        if section not in known and not section.startswith(PHASE_PREFIX):
            raise ConfigError(f"{where}: unknown section [{section}]")

    plant_r = _reader(parser, "plant", where)
    joints = plant_r.intval("joints", 1, positive=True)
    if joints != 1:
        plant_r._fail("joints", "scenario files describe the single-joint reference rig")
    plant = PlantSpec(
        joints=joints,
        load_inertia=plant_r.floatval("load_inertia_kgm2", PlantSpec.load_inertia, positive=True),
        gravity_coeff=plant_r.floatval("load_gravity_coeff_Nm", PlantSpec.gravity_coeff),
        motor_inertia=plant_r.floatval("motor_inertia_kgm2", PlantSpec.motor_inertia, positive=True),
        motor_damping=plant_r.floatval("motor_damping_Nms", PlantSpec.motor_damping, nonneg=True),
        spring_law=plant_r.choice("spring_law", "linear", {"linear", "cubic"}),
        spring_stiffness=plant_r.floatval(
            "spring_stiffness_Nm_rad", PlantSpec.spring_stiffness, positive=True
        ),
        spring_cubic=plant_r.floatval("spring_cubic_Nm_rad3", 0.0, nonneg=True),
        spring_damping=plant_r.floatval("spring_damping_Nms", PlantSpec.spring_damping, nonneg=True),
        condition_limit=plant_r.floatval("condition_limit", 1e8, positive=True),
    )
    plant_r.reject_unknown()

    if parser.has_section("hidden"):
        hid_r = _reader(parser, "hidden", where)
        hidden = HiddenSpec(
            enabled=True,
            coulomb=hid_r.floatval("coulomb_Nm", HiddenSpec.coulomb, nonneg=True),
            coulomb_width=hid_r.floatval("coulomb_width_rad_s", HiddenSpec.coulomb_width, positive=True),
            viscous=hid_r.floatval("viscous_Nms", HiddenSpec.viscous, nonneg=True),
            arm_mass=hid_r.floatval("arm_mass_kg", HiddenSpec.arm_mass, nonneg=True),
            arm_length=hid_r.floatval("arm_length_m", HiddenSpec.arm_length, nonneg=True),
            arm_damping=hid_r.floatval("arm_damping_Nms", HiddenSpec.arm_damping, nonneg=True),
            arm_stiffness=hid_r.floatval("arm_stiffness_Nm_rad", HiddenSpec.arm_stiffness, nonneg=True),
            arm_rest_angle=hid_r.floatval("arm_rest_angle_rad", HiddenSpec.arm_rest_angle),
        )
        hid_r.reject_unknown()
    else:
        hidden = HiddenSpec(enabled=False)

    samp_r = _reader(parser, "sampling", where)
    sampling = SamplingSpec(
        rate_hz=samp_r.floatval("rate_hz", 100.0, positive=True),
        plant_dt=samp_r.floatval("plant_dt_s", 1e-3, positive=True),
    )
    samp_r.reject_unknown()
    substeps = 1.0 / (sampling.rate_hz * sampling.plant_dt)
    if abs(substeps - round(substeps)) > 1e-9 or round(substeps) < 1:
        raise ConfigError(
            f"{where}: [sampling] plant_dt_s must divide the sample interval "
            f"1/rate_hz exactly (got {substeps:.6f} substeps)"
        )

    noise_r = _reader(parser, "noise", where)
    seed = noise_r.intval("seed", 0)
    if seed < 0:
        noise_r._fail("seed", f"must be >= 0, got {seed}")
    noise = NoiseSpec(
        seed=seed,
        mode=noise_r.choice("mode", "direct", {"direct", "derived"}),
        position_std=noise_r.floatval("position_std_rad", NoiseSpec.position_std, nonneg=True),
        velocity_std=noise_r.floatval("velocity_std_rad_s", NoiseSpec.velocity_std, nonneg=True),
        training_position_std=noise_r.floatval("training_position_std_rad", 0.0, nonneg=True),
    )
    noise_r.reject_unknown()
    if noise.mode == "direct" and (noise.position_std <= 0 or noise.velocity_std <= 0):
        raise ConfigError(
            f"{where}: [noise] direct mode needs position_std_rad and "
            "velocity_std_rad_s > 0 (the filter derives its measurement "
            "covariance from them unless [filter] r_diag is given)"
        )

    ctrl_r = _reader(parser, "controller", where)
    controller = ControllerSpec(
        kp=ctrl_r.floatval("kp", ControllerSpec.kp, nonneg=True),
        ki=ctrl_r.floatval("ki", ControllerSpec.ki, nonneg=True),
        kd=ctrl_r.floatval("kd", ControllerSpec.kd, nonneg=True),
    )
    ctrl_r.reject_unknown()

    filt_r = _reader(parser, "filter", where)
    filt = FilterSpec(
        r_diag=filt_r.floats("r_diag", None, count=4 * joints, positive=True),
        q_nom_diag=filt_r.floats(
            "q_nom_diag", filters.DEFAULT_Q_NOM_DIAG, count=5 * joints, positive=True
        ),
        p0_torque=filt_r.floatval("p0_torque_Nm2", filters.DEFAULT_P0_TORQUE, positive=True),
        joseph=filt_r.boolval("joseph_form", False),
    )
    filt_r.reject_unknown()

    gp_r = _reader(parser, "gp", where)
    gpspec = GpSpec(
        budget=gp_r.intval("budget", GpSpec.budget, positive=True),
        eviction=gp_r.choice("eviction", "fifo", {"fifo", "loo"}),
        init_sigma_f=gp_r.floatval("init_sigma_f", GpSpec.init_sigma_f, positive=True),
        init_lengthscales=gp_r.floats(
            "init_lengthscales", GpSpec.init_lengthscales, count=3 * joints, positive=True
        ),
        init_sigma_noise=gp_r.floatval("init_sigma_noise", GpSpec.init_sigma_noise, positive=True),
        noise_floor=gp_r.floatval("sigma_noise_floor", GpSpec.noise_floor, positive=True),
        lengthscale_floors=gp_r.floats(
            "lengthscale_floors", 3 * joints * (0.0,), count=3 * joints
        ),
        restarts=gp_r.intval("optimizer_restarts", GpSpec.restarts, positive=True),
        iterations=gp_r.intval("optimizer_iterations", GpSpec.iterations, positive=True),
        seed=gp_r.intval("optimizer_seed", GpSpec.seed),
    )
    gp_r.reject_unknown()

    bounds_r = _reader(parser, "bounds", where)
    delta = bounds_r.floatval("delta", BoundsSpec.delta, positive=True)
    if delta >= 1.0:
        bounds_r._fail("delta", f"must lie in (0, 1), got {delta}")
    bounds = BoundsSpec(
        delta=delta,
        beta=bounds_r.floatval("beta", BoundsSpec.beta, positive=True),
        safety=bounds_r.floatval("safety_factor", BoundsSpec.safety, positive=True),
        per_coordinate=bounds_r.boolval("per_coordinate", False),
        grid=bounds_r.intval("grid", BoundsSpec.grid, positive=True),
    )
    bounds_r.reject_unknown()

    phase_sections = [s for s in parser.sections() if s.startswith(PHASE_PREFIX)]
    if not phase_sections:
        raise ConfigError(f"{where}: no [phase.*] sections; a scenario needs at least one phase")
    phases = []
    for section in phase_sections:
        phases.append(_parse_phase(parser, section, where))
    _validate_phases(phases, where)

    return ScenarioSpec(
        name=path.stem,
        plant=plant,
        hidden=hidden,
        sampling=sampling,
        noise=noise,
        controller=controller,
        filt=filt,
        gp=gpspec,
        bounds=bounds,
        phases=tuple(phases),
    )


def _parse_phase(parser, section, where) -> PhaseSpec:
    reader = _reader(parser, section, where)
    name = section[len(PHASE_PREFIX):]
    kind = reader.choice("kind", _REQUIRED, {"training", "estimation"})
    duration = reader.floatval("duration_s", _REQUIRED, positive=True)
    controller = reader.choice("controller", _REQUIRED, {"pid", "hold", "resist"})
    active = reader.choice("active_torque", "zero", {"zero", "resist"})

    q_start = q_end = hold = 0.0
    leg = 1.0
    reps = 1
    amp = 2.0
    freq = 0.1
    if controller == "pid":
        q_start = np.deg2rad(reader.floatval("q_start_deg", _REQUIRED))
        q_end = np.deg2rad(reader.floatval("q_end_deg", _REQUIRED))
        leg = reader.floatval("leg_duration_s", _REQUIRED, positive=True)
        reps = reader.intval("repetitions", _REQUIRED, positive=True)
    else:
        hold = np.deg2rad(reader.floatval("hold_angle_deg", _REQUIRED))
    if controller == "resist" or active == "resist":
        amp = reader.floatval("torque_amplitude_Nm", 2.0)
        freq = reader.floatval("torque_frequency_hz", 0.1, positive=True)
    reader.reject_unknown()

    if kind == "training" and active != "zero":
        raise ConfigError(
            f"{where}: [{section}] training phases must have active_torque = zero "
            "(the regression target is only valid without external active torque)"
        )
    if controller == "resist" and active != "resist":
        raise ConfigError(
            f"{where}: [{section}] the resist controller injects the matching "
            "active torque; set active_torque = resist"
        )
    if active == "resist" and controller != "resist":
        raise ConfigError(
            f"{where}: [{section}] active_torque = resist requires controller = resist"
        )
    return PhaseSpec(
        name=name,
        kind=kind,
        duration=duration,
        controller=controller,
        q_start=q_start,
        q_end=q_end,
        leg_duration=leg,
        repetitions=reps,
        hold_angle=hold,
        torque_amplitude=amp,
        torque_frequency=freq,
        active_torque=active,
    )


def _validate_phases(phases, where):
    kinds = [p.kind for p in phases]
    if "training" not in kinds:
        raise ConfigError(f"{where}: at least one training phase is required")
    first_est = kinds.index("estimation") if "estimation" in kinds else len(kinds)
    first_train = kinds.index("training")
    if first_train > first_est:
        raise ConfigError(
            f"{where}: the model must be trained before it is used; put a "
            "training phase before the first estimation phase"
        )
    names = [p.name for p in phases]
    if len(set(names)) != len(names):
        raise ConfigError(f"{where}: duplicate phase names")


# ---------------------------------------------------------------------------
# Builders: spec -> runnable objects
# ---------------------------------------------------------------------------


def build_params(spec: ScenarioSpec) -> dynamics.SeaParams:
    p = spec.plant
    return dynamics.default_params_1dof(
        inertia_load_kgm2=p.load_inertia,
        gravity_coeff_nm=p.gravity_coeff,
        inertia_motor_kgm2=p.motor_inertia,
        damping_motor=p.motor_damping,
        spring_stiffness=p.spring_stiffness,
        spring_damping=p.spring_damping,
        spring_law=p.spring_law,
        spring_cubic=p.spring_cubic,
        condition_limit=p.condition_limit,
    )


def build_hidden(spec: ScenarioSpec) -> dynamics.HiddenResidual:
    h = spec.hidden
    if not h.enabled:
        return dynamics.zero_hidden(spec.plant.joints)
    return dynamics.default_hidden_1dof(
        coulomb_nm=h.coulomb,
        coulomb_width=h.coulomb_width,
        viscous=h.viscous,
        arm_mass_kg=h.arm_mass,
        arm_length_m=h.arm_length,
        arm_damping=h.arm_damping,
        arm_stiffness=h.arm_stiffness,
        arm_rest_angle_rad=h.arm_rest_angle,
    )


def measurement_noise_std(spec: ScenarioSpec) -> np.ndarray:
    """Per-channel injected measurement noise std for [tm, ts, tmd, tsd]."""
    n = spec.plant.joints
    pos = np.full(2 * n, spec.noise.position_std)
    vel = np.full(2 * n, spec.noise.velocity_std)
    return np.concatenate([pos, vel])


def build_filter_config(spec: ScenarioSpec) -> filters.FilterConfig:
    n = spec.plant.joints
    if spec.filt.r_diag is not None:
        r = np.diag(np.asarray(spec.filt.r_diag, dtype=float))
    else:
        r = np.diag(measurement_noise_std(spec) ** 2)
    return filters.FilterConfig(
        n=n,
        dt=spec.sample_dt,
        q_nom=np.diag(np.asarray(spec.filt.q_nom_diag, dtype=float)),
        r=r,
        p0_torque=spec.filt.p0_torque,
        joseph=spec.filt.joseph,
    )


def build_gp_init(spec: ScenarioSpec) -> gp.Hyperparameters:
    return gp.Hyperparameters(
        sigma_f=spec.gp.init_sigma_f,
        lengthscales=np.asarray(spec.gp.init_lengthscales, dtype=float),
        sigma_noise=spec.gp.init_sigma_noise,
    )


# ---------------------------------------------------------------------------
# Bundled scenarios
# ---------------------------------------------------------------------------


def bundled_scenario_names() -> list[str]:
    root = resources.files("seatorque") / "scenarios"
    return sorted(
        entry.name[: -len(SCENARIO_SUFFIX)]
        for entry in root.iterdir()
        if entry.name.endswith(SCENARIO_SUFFIX)
    )


def resolve_scenario(name_or_path) -> Path:
    """Map a bundled scenario name or a filesystem path to a scenario file."""
    candidate = Path(name_or_path)
    if candidate.suffix == SCENARIO_SUFFIX and candidate.exists():
        return candidate
    bare = str(name_or_path)
    if "/" not in bare and not bare.endswith(SCENARIO_SUFFIX):
        root = resources.files("seatorque") / "scenarios"
        bundled = root / f"{bare}{SCENARIO_SUFFIX}"
        if bundled.is_file():
            return Path(str(bundled))
    if candidate.exists():
        return candidate
    raise ConfigError(
        f"no scenario named {name_or_path!r}; bundled scenarios: "
        + ", ".join(bundled_scenario_names())
    )
