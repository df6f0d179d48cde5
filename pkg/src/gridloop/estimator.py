"""Weighted least-squares voltage estimation from sensors and pseudo-measurements."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from gridloop.netmodel import LinearPFModel
from gridloop.sensing import MeasurementPlan, MeasurementSnapshot

log = logging.getLogger(__name__)

CONDITION_WARN = 1e12


class UnobservableError(np.linalg.LinAlgError):
    """The gain matrix ``H' W H`` is singular: some states cannot be recovered."""


@dataclass(frozen=True)
class SeProblem:
    """Linear measurement model ``y = H z + noise`` over ``z = (p, q)``.

    Rows are ordered: pseudo-p (one per bus), pseudo-q, then one per voltage
    sensor. ``w`` holds the diagonal of ``W``.
    """

    H: np.ndarray
    w: np.ndarray
    y: np.ndarray
    model: LinearPFModel

    def __post_init__(self) -> None:
        if self.H.shape[0] != self.w.shape[0] or self.H.shape[0] != self.y.shape[0]:
            raise ValueError("H, w and y row counts differ")
        if np.any(self.w <= 0) or not np.all(np.isfinite(self.w)):
            raise ValueError("weights must be finite and strictly positive")

    @property
    def W(self) -> np.ndarray:
        return np.diag(self.w)


@dataclass(frozen=True)
class SeResult:
    z_hat: np.ndarray
    v_hat: np.ndarray
    wls_cost: float
    observable: bool
    condition_estimate: float

    @property
    def p_hat(self) -> np.ndarray:
        return self.z_hat[: self.v_hat.shape[0]]

    @property
    def q_hat(self) -> np.ndarray:
        return self.z_hat[self.v_hat.shape[0] :]


def assemble(
    plan: MeasurementPlan,
    snapshot: MeasurementSnapshot,
    linear_model: LinearPFModel,
    nominal: tuple[np.ndarray, np.ndarray] | None = None,
) -> SeProblem:
    """Stack pseudo and sensor rows with the voltage model substituted in.

    Sensor rows are rows of ``[A B]`` with targets ``|v~| - r0``. Pseudo
    weights come from ``plan.sigma_* x |nominal|``; ``nominal`` defaults to
    the pseudo values themselves.
    """
    n = linear_model.n_bus
    if plan.n_bus != n:
        raise ValueError(f"plan covers {plan.n_bus} buses, model has {n}")
    idx = plan.sensor_index
    sv, _, _ = plan.sigmas()
    if nominal is None:
        nominal = (snapshot.p_pseudo_meas, snapshot.q_pseudo_meas)
    std_p, std_q = plan.pseudo_std(*nominal)
    v_tilde = np.array([snapshot.v_meas[b] for b in plan.v_sensors])
    std_v = sv * np.abs(v_tilde)

    eye = np.eye(n)
    zeros = np.zeros((n, n))
    H = np.vstack([
        np.hstack([eye, zeros]),
        np.hstack([zeros, eye]),
        np.hstack([linear_model.A[idx], linear_model.B[idx]]),
    ])
    y = np.concatenate([snapshot.p_pseudo_meas, snapshot.q_pseudo_meas, v_tilde - linear_model.r0[idx]])
    w = 1.0 / np.concatenate([std_p, std_q, std_v]) ** 2
    return SeProblem(H=H, w=w, y=y, model=linear_model)


def check_observability(H: np.ndarray, rtol: float = 1e-10) -> bool:
    """Full column rank of ``H`` by pivoted QR."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    rows, cols = H.shape
    if rows < cols:
        return False
    if cols == 0:
        return True
    R = linalg.qr(H, mode="r", pivoting=True)[0]
    diag = np.abs(np.diag(R))
    return bool(diag.min() > rtol * max(np.linalg.norm(H, 2), np.finfo(float).tiny))


def solve_wls(problem: SeProblem) -> SeResult:
    """Minimize ``0.5 (y - H z)' W (y - H z)`` through a Cholesky factor of the gain matrix."""
    H, w, y = problem.H, problem.w, problem.y
    HtW = H.T * w
    gain = HtW @ H
    try:
        factor = linalg.cho_factor(gain, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise UnobservableError("gain matrix H'WH is not positive definite; add measurements") from None
    # reciprocal 1-norm condition estimate from the Cholesky factor
    rcond, info = linalg.lapack.dpocon(factor[0], np.linalg.norm(gain, 1), uplo="L")
    cond = np.inf if rcond == 0 else 1.0 / rcond
    if cond > CONDITION_WARN:
        log.warning("ill-conditioned gain matrix (condition ~ %.3g)", cond)
    z_hat = linalg.cho_solve(factor, HtW @ y, check_finite=False)
    resid = y - H @ z_hat
    n = problem.model.n_bus
    v_hat = problem.model.evaluate(z_hat[:n], z_hat[n:])
    return SeResult(
        z_hat=z_hat,
        v_hat=v_hat,
        wls_cost=0.5 * float(resid @ (w * resid)),
        observable=True,
        condition_estimate=float(cond),
    )


def estimate(
    plan: MeasurementPlan,
    snapshot: MeasurementSnapshot,
    linear_model: LinearPFModel,
    nominal: tuple[np.ndarray, np.ndarray] | None = None,
) -> SeResult:
    return solve_wls(assemble(plan, snapshot, linear_model, nominal))
