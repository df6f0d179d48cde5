"""Nonlinear AC power flow by Z-bus fixed-point iteration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gridloop.netmodel import AdmittanceModel

COLLAPSE_FLOOR = 0.5


class PowerFlowDivergence(RuntimeError):
    """The fixed-point iteration failed to reach tolerance or collapsed."""

    def __init__(self, message: str, iterations: int, residual: float):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class PowerFlowSolution:
    v: np.ndarray
    v_mag: np.ndarray
    iterations: int
    residual: float


def mismatch(adm: AdmittanceModel, v: np.ndarray, s: np.ndarray, v0: complex | None = None) -> np.ndarray:
    """Complex power mismatch ``s - diag(v) conj(Y v + y_bar V0)``."""
    v0 = adm.v0 if v0 is None else v0
    return s - v * np.conj(adm.Y @ v + adm.y_bar * v0)


def no_load_voltage(adm: AdmittanceModel, v0: complex | None = None) -> np.ndarray:
    v0 = adm.v0 if v0 is None else v0
    return -np.linalg.solve(adm.Y, adm.y_bar * v0)


def solve_pf(
    admittance: AdmittanceModel,
    injections: tuple[np.ndarray, np.ndarray],
    V0: complex | None = None,
    tol: float = 1e-9,
    max_iter: int = 100,
) -> PowerFlowSolution:
    """Solve for PQ-bus voltage phasors given net injections ``(p, q)`` in pu.

    Iterates ``v <- Y^-1 (conj(s) / conj(v) - y_bar V0)`` from the no-load
    profile until the mismatch falls to ``tol``.
    """
    p, q = injections
    s = np.asarray(p, dtype=float) + 1j * np.asarray(q, dtype=float)
    if s.shape != (admittance.n_bus,):
        raise ValueError(f"expected {admittance.n_bus} injections, got shape {s.shape}")
    V0 = admittance.v0 if V0 is None else complex(V0)
    Z = admittance.zbus
    w = -Z @ (admittance.y_bar * V0)
    Ys = admittance.Y
    yv0 = admittance.y_bar * V0
    s_conj = np.conj(s)

    v = w.copy()
    residual = float(np.max(np.abs(s - v * np.conj(Ys @ v + yv0)), initial=0.0))
    for it in range(1, max_iter + 1):
        if residual <= tol:
            return _solution(v, it - 1, residual)
        v = Z @ (s_conj / np.conj(v)) + w
        vm = np.abs(v)
        if not np.all(np.isfinite(vm)) or vm.min() < COLLAPSE_FLOOR:
            raise PowerFlowDivergence(
                f"voltage collapse at iteration {it} (min |v| = {np.nanmin(vm):.3g} pu)", it, np.inf
            )
        residual = float(np.max(np.abs(s - v * np.conj(Ys @ v + yv0))))
    if residual <= tol:
        return _solution(v, max_iter, residual)
    raise PowerFlowDivergence(
        f"no convergence in {max_iter} iterations (residual {residual:.3g} pu)", max_iter, residual
    )


def _solution(v: np.ndarray, iterations: int, residual: float) -> PowerFlowSolution:
    return PowerFlowSolution(v=v, v_mag=np.abs(v), iterations=iterations, residual=residual)
