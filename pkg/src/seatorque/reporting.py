"""Delimited output, independent re-evaluation, and rendered figures.

Every writer formats floats with repr(), which round-trips doubles exactly:
identical runs produce byte-identical files.  The evaluate_* readers recompute
summary statistics from the files alone (compensated summation, no shared code
with the simulation loop), so a written report can be checked independently.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .errors import MalformedCsvError
from .harness import EstimationResult, McResult

ESTIMATOR_NAMES = ("gpakf", "akf", "spring")


def _fmt(value) -> str:
    return repr(float(value))


def _write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)


def _vector_header(prefix: str, count: int):
    return [f"{prefix}_{j + 1}" for j in range(count)]


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------


def write_estimator_csv(path, result: EstimationResult, which: str):
    """Full per-step log of one filter: estimate, covariance diagonal, residual
    readout, innovation, torque estimate, and the true torque for reference."""
    if which not in ("gpakf", "akf"):
        raise ValueError("which must be 'gpakf' or 'akf'")
    records = result.gpakf if which == "gpakf" else result.akf
    n = result.truth.u.shape[1]
    dim = 5 * n
    header = (
        ["t"]
        + _vector_header("xhat", dim)
        + _vector_header("pdiag", dim)
        + _vector_header("gp_mean", n)
        + _vector_header("gp_var", n)
        + _vector_header("innovation", 4 * n)
        + _vector_header("tau_hat", n)
        + _vector_header("tau_true", n)
    )
    tau_true = result.truth.tau_true
    rows = []
    for k, rec in enumerate(records, start=1):
        row = [rec.t, *rec.x_post, *np.diag(rec.p_post), *rec.gp_mean, *rec.gp_var,
               *rec.innovation, *rec.torque_estimate(n), *tau_true[k]]
        rows.append([_fmt(v) for v in row])
    _write_rows(path, header, rows)


def write_spring_csv(path, result: EstimationResult):
    """Deflection-based torque readout per sample, with the true torque."""
    n = result.truth.u.shape[1]
    header = ["t"] + _vector_header("tau_hat", n) + _vector_header("tau_true", n)
    rows = []
    for k, t in enumerate(result.truth.times):
        row = [t, *result.spring[k], *result.truth.tau_true[k]]
        rows.append([_fmt(v) for v in row])
    _write_rows(path, header, rows)


def write_bounds_csv(path, result: EstimationResult):
    """Guaranteed torque interval and coverage flags per step."""
    n = result.truth.u.shape[1]
    header = (
        ["t"]
        + _vector_header("center", n)
        + _vector_header("radius", n)
        + ["means_trace", "scale", "state_covered", "torque_covered"]
    )
    rows = []
    for row_rec in result.bound_rows:
        row = [_fmt(row_rec.t)]
        row += [_fmt(v) for v in row_rec.torque_center]
        row += [_fmt(v) for v in row_rec.torque_radius]
        row += [_fmt(row_rec.means_trace), _fmt(row_rec.scale),
                str(int(row_rec.state_covered)), str(int(row_rec.torque_covered))]
        rows.append(row)
    _write_rows(path, header, rows)


def write_metrics_csv(path, result: EstimationResult):
    """Summary table: one column per estimator, plus bound statistics."""
    metrics = result.metrics
    header = ["metric"] + list(ESTIMATOR_NAMES)
    rows = [
        ["rmse_Nm"] + [_fmt(metrics.rmse[name]) for name in ESTIMATOR_NAMES],
        ["state_coverage", _fmt(metrics.state_coverage), "", ""],
        ["torque_coverage", _fmt(metrics.torque_coverage), "", ""],
        ["mean_radius_Nm", _fmt(metrics.mean_radius), "", ""],
        ["steps", str(metrics.steps), str(metrics.steps), str(metrics.steps)],
    ]
    _write_rows(path, header, rows)


def write_plotdata_csv(path, result: EstimationResult):
    """Compact per-step series for external plotting tools."""
    n = result.truth.u.shape[1]
    dim = 5 * n
    header = ["t"]
    for base in ("tau_true", "gpakf", "gpakf_2sig", "akf", "spring", "bound_center", "bound_radius"):
        header += _vector_header(base, n)
    rows = []
    for k in range(1, len(result.truth.times)):
        rec = result.gpakf[k - 1]
        rec_a = result.akf[k - 1]
        brow = result.bound_rows[k]
        two_sig = 2.0 * np.sqrt(np.clip(np.diag(rec.p_post)[dim - n:], 0.0, None))
        row = [result.truth.times[k], *result.truth.tau_true[k],
               *rec.torque_estimate(n), *two_sig, *rec_a.torque_estimate(n),
               *result.spring[k], *brow.torque_center, *brow.torque_radius]
        rows.append([_fmt(v) for v in row])
    _write_rows(path, header, rows)


def write_mc_csv(path, mc: McResult):
    """Per-run metrics of a replication study."""
    names = sorted(mc.rmse_mean)
    header = ["run", "phase"] + [f"rmse_{n}" for n in names] + [
        "covered_states", "covered_torques", "rows", "mean_radius",
    ]
    rows = []
    for mr in mc.per_run:
        row = [str(mr.run), mr.phase]
        row += [_fmt(mr.metrics.rmse[n]) for n in names]
        row += [str(mr.metrics.covered_states), str(mr.metrics.covered_torques),
                str(mr.metrics.bound_rows_total), _fmt(mr.metrics.mean_radius)]
        rows.append(row)
    _write_rows(path, header, rows)


def write_mc_summary_csv(path, mc: McResult):
    names = sorted(mc.rmse_mean)
    header = ["metric", "value"]
    rows = [["runs", str(mc.runs)], ["seed", str(mc.seed)]]
    for n in names:
        rows.append([f"rmse_mean_{n}", _fmt(mc.rmse_mean[n])])
        rows.append([f"rmse_max_{n}", _fmt(mc.rmse_max[n])])
    rows += [
        ["state_coverage", _fmt(mc.state_coverage)],
        ["torque_coverage", _fmt(mc.torque_coverage)],
        ["mean_radius_Nm", _fmt(mc.mean_radius)],
        ["total_rows", str(mc.total_rows)],
        ["covered_states", str(mc.covered_states)],
        ["covered_torques", str(mc.covered_torques)],
    ]
    _write_rows(path, header, rows)


# ---------------------------------------------------------------------------
# Independent evaluation from files
# ---------------------------------------------------------------------------


def _read_table(path):
    """Read a delimited file into (header, rows of floats-or-strings)."""
    path = Path(path)
    try:
        handle = open(path, "r", newline="")
    except OSError as exc:
        raise MalformedCsvError(f"cannot open {path}: {exc}") from exc
    with handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedCsvError(f"{path}:1: file is empty")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise MalformedCsvError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            rows.append((lineno, row))
    if not rows:
        raise MalformedCsvError(f"{path}:1: no data rows")
    return header, rows


def _columns(path, header, wanted_prefix):
    cols = [i for i, name in enumerate(header) if name.startswith(wanted_prefix + "_")]
    if not cols:
        raise MalformedCsvError(f"{path}: no '{wanted_prefix}_*' columns in header")
    return cols


def _float_field(path, lineno, row, col):
    try:
        return float(row[col])
    except ValueError:
        raise MalformedCsvError(
            f"{path}:{lineno}: field {col + 1} is not a number: {row[col]!r}"
        )


def evaluate_estimator_csv(path) -> dict:
    """Recompute the torque RMSE of an estimator log from the file alone.

    Uses compensated summation over the squared errors; shares no state with
    the simulation, so it cross-checks both the estimator and the writer.
    """
    header, rows = _read_table(path)
    hat_cols = _columns(path, header, "tau_hat")
    true_cols = _columns(path, header, "tau_true")
    if len(hat_cols) != len(true_cols):
        raise MalformedCsvError(f"{path}: tau_hat/tau_true column count mismatch")
    squares = []
    for lineno, row in rows:
        for hc, tc in zip(hat_cols, true_cols):
            diff = _float_field(path, lineno, row, hc) - _float_field(path, lineno, row, tc)
            squares.append(diff * diff)
    rmse = math.sqrt(math.fsum(squares) / len(squares))
    return {"rmse": rmse, "rows": len(rows), "joints": len(hat_cols)}


def evaluate_bounds_csv(path) -> dict:
    """Recompute coverage rates and the mean radius from a bounds log."""
    header, rows = _read_table(path)
    radius_cols = _columns(path, header, "radius")
    try:
        state_col = header.index("state_covered")
        torque_col = header.index("torque_covered")
    except ValueError:
        raise MalformedCsvError(f"{path}: missing coverage columns")
    state_hits = 0
    torque_hits = 0
    radii = []
    for lineno, row in rows:
        state_hits += int(_float_field(path, lineno, row, state_col) != 0.0)
        torque_hits += int(_float_field(path, lineno, row, torque_col) != 0.0)
        radii.append(math.fsum(_float_field(path, lineno, row, c) for c in radius_cols)
                     / len(radius_cols))
    count = len(rows)
    return {
        "state_coverage": state_hits / count,
        "torque_coverage": torque_hits / count,
        "mean_radius": math.fsum(radii) / count,
        "rows": count,
    }


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------


def render_figures(outdir, stem: str, result: EstimationResult) -> list:
    """Render torque-comparison and bound-band figures as PNG files."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    n = result.truth.u.shape[1]
    t = result.truth.times[1:]
    tau_true = result.truth.tau_true[1:, 0]
    gp_tau = np.array([rec.torque_estimate(n)[0] for rec in result.gpakf])
    akf_tau = np.array([rec.torque_estimate(n)[0] for rec in result.akf])
    spring_tau = result.spring[1:, 0]
    paths = []

    fig, ax = plt.subplots(figsize=(9, 4.5))
    ax.plot(t, tau_true, "k-", label="true", linewidth=1.6)
    ax.plot(t, gp_tau, label="learning filter", linewidth=1.1)
    ax.plot(t, akf_tau, label="nominal filter", linewidth=1.1)
    ax.plot(t, spring_tau, label="deflection readout", linewidth=1.1, alpha=0.8)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("active torque [Nm]")
    ax.set_title(f"{result.phase}: torque estimates")
    ax.legend(loc="best")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = outdir / f"{stem}_torque.png"
    fig.savefig(path, dpi=130)
    plt.close(fig)
    paths.append(path)

    centers = np.array([row.torque_center[0] for row in result.bound_rows[1:]])
    radii = np.array([row.torque_radius[0] for row in result.bound_rows[1:]])
    fig, ax = plt.subplots(figsize=(9, 4.5))
    ax.fill_between(t, centers - radii, centers + radii, alpha=0.25,
                    label="guaranteed interval", color="tab:blue")
    ax.plot(t, tau_true, "k-", label="true", linewidth=1.6)
    ax.plot(t, centers, "tab:blue", label="interval center", linewidth=1.0)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("active torque [Nm]")
    ax.set_title(f"{result.phase}: guaranteed torque bounds")
    ax.legend(loc="best")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = outdir / f"{stem}_bounds.png"
    fig.savefig(path, dpi=130)
    plt.close(fig)
    paths.append(path)
    return paths
