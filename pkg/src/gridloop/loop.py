"""Closed loop: controller step, AC plant, measurements, estimation, dual feedback."""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from gridloop import acpf, controller, estimator
from gridloop.controller import ControllerState, ConvergenceCertificate, OpfProblem
from gridloop.netmodel import AdmittanceModel, NetworkCase, build_admittance
from gridloop.sensing import MeasurementPlan, take_measurements

log = logging.getLogger(__name__)

FULL_TRACE_LIMIT = 100_000
DECIMATION = 10
TAIL_FRACTION = 0.1


class Mode(str, enum.Enum):
    SE_FEEDBACK = "se_feedback"
    MEASUREMENT_ONLY = "measurement_only"
    LINEAR_MODEL = "linear_model"


@dataclass(frozen=True)
class LoopConfig:
    """Loop settings.

    ``eps=None`` takes 0.9 of the certified maximum step. The stop test is
    ``||x^k - x^{k-W}||_inf / W <= stop_tol`` with ``W = stop_window``; the
    default window of 1 is the plain step-norm rule. ``sensed_source`` picks
    what feeds back at sensed buses in SE mode: the raw measurement or the
    estimate.
    """

    mode: Mode = Mode.SE_FEEDBACK
    eps: float | None = None
    max_iters: int = 5000
    stop_tol: float = 1e-7
    plan: MeasurementPlan | None = None
    stop_window: int = 1
    sensed_source: str = "measurement"

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.stop_window < 1:
            raise ValueError("stop_window must be >= 1")
        if self.eps is not None and not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.sensed_source not in ("measurement", "estimate"):
            raise ValueError("sensed_source must be 'measurement' or 'estimate'")
        if self.mode is not Mode.LINEAR_MODEL and self.plan is None:
            raise ValueError(f"mode {self.mode.value} needs a measurement plan")


@dataclass
class TraceRow:
    k: int
    p: np.ndarray
    q: np.ndarray
    mu: np.ndarray
    r_feedback: np.ndarray
    v_true: np.ndarray
    v_hat: np.ndarray
    v_meas: np.ndarray
    se_err_avg: float
    se_err_max: float
    se_err_running_avg: float
    se_err_running_max: float
    step_norm: float

    @property
    def state(self) -> ControllerState:
        return ControllerState(self.p, self.q, self.mu)


@dataclass
class LoopTrace:
    rows: list[TraceRow]
    mode: Mode
    eps: float
    bus_ids: np.ndarray
    constraint_names: tuple[str, ...]
    converged: bool = False
    diverged: bool = False
    failure: str | None = None
    offending_state: ControllerState | None = None
    iters: int = 0
    # exact per-iteration series kept even when rows are decimated
    rho: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dist2: np.ndarray | None = None
    runtime_s: float = 0.0
    summary: dict[str, Any] = field(default_factory=dict)

    @property
    def final(self) -> TraceRow:
        return self.rows[-1]


def _dual_mask(problem: OpfProblem, sensed: np.ndarray) -> np.ndarray:
    """Constraint rows that only involve sensed buses."""
    touched = problem.G != 0
    return ~np.any(touched[:, ~sensed], axis=1)


def run(
    problem: OpfProblem,
    case: NetworkCase,
    config: LoopConfig,
    admittance: AdmittanceModel | None = None,
    reference: ControllerState | None = None,
    certificate: ConvergenceCertificate | None = None,
) -> LoopTrace:
    """Iterate the feedback controller from the nominal injection pattern.

    Row ``k`` of the trace holds iterate ``x^k`` and the feedback observed at
    it. Each iteration moves primal and dual variables from ``x^k``, the dual
    using the feedback ``r^k``; the plant is then solved at ``x^{k+1}`` and
    sensed/estimated to produce ``r^{k+1}``.
    """
    t_start = time.perf_counter()
    adm = admittance if admittance is not None else build_admittance(case)
    model = problem.model
    n = problem.n_bus
    nominal = (case.nominal_p, case.nominal_q)
    mode = config.mode

    if config.eps is None:
        certificate = certificate or controller.certify_step(problem)
        eps = certificate.default_eps()
    else:
        eps = float(config.eps)

    sensed = np.zeros(n, dtype=bool)
    plan = config.plan
    if plan is not None:
        sensed[plan.sensor_index] = True
    mask = _dual_mask(problem, sensed) if mode is Mode.MEASUREMENT_ONLY else None
    if mode is Mode.SE_FEEDBACK:
        probe = estimator.assemble(
            plan, take_measurements(plan, (nominal[0], nominal[1], model.r0), 0, nominal), model, nominal
        )
        if not estimator.check_observability(probe.H):
            raise estimator.UnobservableError("measurement plan leaves the state unobservable")

    def observe(state: ControllerState, k: int) -> dict[str, Any]:
        sol = acpf.solve_pf(adm, (state.p, state.q), case.v0)
        v_true = sol.v_mag
        r_lin = model.evaluate(state.p, state.q)
        v_meas = np.full(n, np.nan)
        v_hat = np.full(n, np.nan)
        if mode is Mode.LINEAR_MODEL:
            r_fb = r_lin
        else:
            snap = take_measurements(plan, (state.p, state.q, v_true), k, nominal)
            v_meas[plan.sensor_index] = [snap.v_meas[b] for b in plan.v_sensors]
            if mode is Mode.SE_FEEDBACK:
                v_hat = estimator.estimate(plan, snap, model, nominal).v_hat
                r_fb = v_hat.copy()
                if config.sensed_source == "measurement":
                    r_fb[sensed] = v_meas[sensed]
            else:
                # unsensed entries only reach masked dual rows
                r_fb = np.where(sensed, v_meas, r_lin)
        return {"v_true": v_true, "v_meas": v_meas, "v_hat": v_hat, "r_fb": r_fb, "r_lin": r_lin}

    def rho_at(state: ControllerState, obs: dict[str, Any]) -> float:
        g_lin = controller.constraint(problem, obs["r_lin"]) - problem.eta * state.mu
        g_fb = controller.constraint(problem, obs["r_fb"]) - problem.eta * state.mu
        if mask is not None:
            g_fb = np.where(mask, g_fb, 0.0)
        diff = g_lin - g_fb
        return float(diff @ diff)

    trace = LoopTrace(
        rows=[],
        mode=mode,
        eps=eps,
        bus_ids=case.bus_ids,
        constraint_names=problem.constraint_names or tuple(f"g_{j}" for j in range(problem.n_dual)),
    )
    ref_x = reference.as_vector() if reference is not None else None

    state = controller.initial_state(problem, *nominal)
    if mask is not None:
        state = ControllerState(state.p, state.q, np.where(mask, state.mu, 0.0))
    try:
        obs = observe(state, 0)
    except acpf.PowerFlowDivergence as exc:
        trace.diverged, trace.failure, trace.offending_state = True, str(exc), state
        trace.runtime_s = time.perf_counter() - t_start
        return trace

    rho: list[float] = []
    dist2: list[float] = []
    history = [state.as_vector()]
    err_sum = err_max_sum = 0.0
    step_norm = math.nan
    k = 0
    while True:
        if mode is Mode.SE_FEEDBACK:
            err = np.abs(obs["v_hat"] - obs["v_true"]) / obs["v_true"]
            e_avg, e_max = float(err.mean()), float(err.max())
            err_sum += e_avg
            err_max_sum += e_max
            run_avg, run_max = err_sum / (k + 1), err_max_sum / (k + 1)
        else:
            e_avg = e_max = run_avg = run_max = math.nan
        rho.append(rho_at(state, obs))
        if ref_x is not None:
            diff = state.as_vector() - ref_x
            dist2.append(float(diff @ diff))
        if k <= FULL_TRACE_LIMIT or k % DECIMATION == 0:
            trace.rows.append(TraceRow(
                k=k, p=state.p, q=state.q, mu=state.mu, r_feedback=obs["r_fb"], v_true=obs["v_true"],
                v_hat=obs["v_hat"], v_meas=obs["v_meas"], se_err_avg=e_avg, se_err_max=e_max,
                se_err_running_avg=run_avg, se_err_running_max=run_max, step_norm=step_norm,
            ))
        window = config.stop_window
        if k >= window:
            drift = float(np.max(np.abs(history[-1] - history[-1 - window]))) / window
            if drift <= config.stop_tol:
                trace.converged = True
                break
        if k >= config.max_iters:
            break

        new = controller.primal_dual_step(problem, state, obs["r_fb"], eps, dual_mask=mask)
        step_norm = float(np.max(np.abs(new.as_vector() - state.as_vector())))
        k += 1
        try:
            obs = observe(new, k)
        except acpf.PowerFlowDivergence as exc:
            trace.diverged, trace.failure, trace.offending_state = True, f"iteration {k}: {exc}", new
            break
        state = new
        history.append(state.as_vector())
        if len(history) > window + 1:
            history.pop(0)

    if trace.rows[-1].k != k and not trace.diverged:
        trace.rows.append(TraceRow(
            k=k, p=state.p, q=state.q, mu=state.mu, r_feedback=obs["r_fb"], v_true=obs["v_true"],
            v_hat=obs["v_hat"], v_meas=obs["v_meas"], se_err_avg=e_avg, se_err_max=e_max,
            se_err_running_avg=run_avg, se_err_running_max=run_max, step_norm=step_norm,
        ))
    trace.iters = k
    trace.rho = np.array(rho)
    trace.dist2 = np.array(dist2) if ref_x is not None else None
    trace.runtime_s = time.perf_counter() - t_start
    log.info("loop %s: %d iterations, converged=%s, %.2fs", mode.value, k, trace.converged, trace.runtime_s)
    return trace


@dataclass(frozen=True)
class BoundCheck:
    rho_hat: float
    bound: float
    holds: bool | None
    tail_dist2: float


def certify_bound(
    trace: LoopTrace,
    certificate: ConvergenceCertificate,
    reference: ControllerState | None,
    problem: OpfProblem | None = None,
) -> BoundCheck:
    """Compare the tail distance to the saddle point with the asymptotic bound.

    ``rho_hat`` is the largest squared gap between the model gradient map and
    the feedback gradient map seen along the trajectory. With ``rho_hat == 0``
    the bound is zero and only says the iteration converges, which no finite
    trace can show exactly; ``holds`` is then ``None``.
    """
    if reference is None:
        raise ValueError("certify_bound needs the reference saddle point")
    if trace.dist2 is not None:
        dist2 = trace.dist2
    else:
        ref_x = reference.as_vector()
        dist2 = np.array([float(np.sum((r.state.as_vector() - ref_x) ** 2)) for r in trace.rows])
    rho_hat = float(trace.rho.max()) if trace.rho.size else 0.0
    bound = certificate.limit_bound(trace.eps, rho_hat)
    n_tail = max(1, int(math.ceil(TAIL_FRACTION * dist2.size)))
    tail = float(dist2[-n_tail:].max())
    holds = None if rho_hat == 0.0 else bool(np.isfinite(bound) and tail <= bound * (1 + 1e-6))
    return BoundCheck(rho_hat=rho_hat, bound=bound, holds=holds, tail_dist2=tail)


def voltage_violation(v: np.ndarray, v_lo: float, v_hi: float) -> np.ndarray:
    return np.maximum(0.0, np.maximum(v - v_hi, v_lo - v))


def summarize(
    trace: LoopTrace,
    v_lo: float,
    v_hi: float,
    check: BoundCheck | None = None,
    certificate: ConvergenceCertificate | None = None,
    sensors: tuple[int, ...] = (),
) -> dict[str, Any]:
    final = trace.rows[-1]
    viol = voltage_violation(final.v_true, v_lo, v_hi)
    over = [int(b) for b, x in zip(trace.bus_ids, viol) if x > 0]
    summary: dict[str, Any] = {
        "mode": trace.mode.value,
        "converged": trace.converged,
        "diverged": trace.diverged,
        "failure": trace.failure,
        "iters": trace.iters,
        "eps": trace.eps,
        "max_violation_pu": float(viol.max()),
        "violating_buses": over,
        "violating_unsensed_buses": [b for b in over if b not in sensors],
        "max_v_true": float(final.v_true.max()),
        "se_err_avg_final": _none_if_nan(final.se_err_running_avg),
        "se_err_max_final": _none_if_nan(final.se_err_running_max),
        "se_err_avg_last": _none_if_nan(final.se_err_avg),
        "se_err_max_last": _none_if_nan(final.se_err_max),
        "rho_hat": check.rho_hat if check else None,
        "bound": (check.bound if math.isfinite(check.bound) else None) if check else None,
        "tail_dist2": check.tail_dist2 if check else None,
        "bound_holds": check.holds if check else None,
        "runtime_s": trace.runtime_s,
    }
    if certificate is not None:
        summary.update(L=certificate.L, M_strong=certificate.M_strong, eps_max=certificate.eps_max,
                       gamma=certificate.gamma(trace.eps))
    trace.summary = summary
    return summary


def _none_if_nan(x: float) -> float | None:
    return None if math.isnan(x) else x


def trace_header(trace: LoopTrace) -> list[str]:
    ids = [int(b) for b in trace.bus_ids]
    cols = ["k"]
    cols += [f"p_{b}" for b in ids] + [f"q_{b}" for b in ids]
    cols += [f"mu_{name}" for name in trace.constraint_names]
    cols += [f"vtrue_{b}" for b in ids] + [f"vhat_{b}" for b in ids] + [f"vmeas_{b}" for b in ids]
    cols += ["se_err_avg", "se_err_max", "se_err_run_avg", "se_err_run_max", "step_norm"]
    return cols


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def write_trace_csv(trace: LoopTrace, path: str | Path) -> None:
    """One row per recorded iteration; blank cells mark quantities not produced in the mode."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(trace_header(trace))
        for row in trace.rows:
            values = [str(row.k)]
            for arr in (row.p, row.q, row.mu, row.v_true, row.v_hat, row.v_meas):
                values += [_fmt(x) for x in arr]
            values += [_fmt(x) for x in (row.se_err_avg, row.se_err_max, row.se_err_running_avg,
                                         row.se_err_running_max, row.step_norm)]
            writer.writerow(values)


def write_summary_json(summary: dict[str, Any], path: str | Path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
