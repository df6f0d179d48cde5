"""Projected primal-dual gradient controller on the regularized Lagrangian.

The stacked iterate is ``x = (p, q, mu)``. With quadratic local costs and an
affine constraint ``g(r) = G r + d`` on the linearized quantities, the gradient
map ``F(x) = (grad_p L, grad_q L, -grad_mu L)`` is affine, ``F(x) = H x + b``,
which is what makes the step-size certificate computable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from gridloop.netmodel import LinearPFModel


class CertificateUnavailable(ValueError):
    """The problem is not strongly monotone on its free coordinates."""


@dataclass(frozen=True, eq=False)
class OpfProblem:
    """Quadratic OPF instance over the linear power-flow model.

    Local cost ``c2_p (p_target - p)^2 + c2_q (q - q_target)^2`` per bus, an optional
    system cost ``0.5 z' C0_hess z + C0_lin' z`` on ``z = (p, q)``, box limits
    per bus and the affine constraint ``G r + d <= 0``. A bus whose box is
    degenerate (``p_min == p_max`` and ``q_min == q_max``) is uncontrollable.
    """

    model: LinearPFModel
    c2_p: np.ndarray
    p_target: np.ndarray
    c2_q: np.ndarray
    p_min: np.ndarray
    p_max: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    G: np.ndarray
    d: np.ndarray
    eta: float
    C0_hess: np.ndarray | None = None
    C0_lin: np.ndarray | None = None
    constraint_names: tuple[str, ...] = ()
    q_target: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        n = self.model.n_bus
        if self.q_target is None:
            object.__setattr__(self, "q_target", np.zeros(n))
        for name in ("q_target", "c2_p", "p_target", "c2_q", "p_min", "p_max", "q_min", "q_max"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
            object.__setattr__(self, name, arr)
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        d = np.asarray(self.d, dtype=float)
        if G.shape[1] != self.model.A.shape[0] or d.shape != (G.shape[0],):
            raise ValueError(f"constraint shapes G{G.shape} d{d.shape} do not match model")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "d", d)
        if np.any(self.p_min > self.p_max) or np.any(self.q_min > self.q_max):
            bad = np.flatnonzero((self.p_min > self.p_max) | (self.q_min > self.q_max))
            raise ValueError(f"empty box at bus index {bad.tolist()}")
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        ctrl = self.controllable
        if np.any(self.c2_p[ctrl] <= 0) or np.any(self.c2_q[ctrl] <= 0):
            raise ValueError("cost curvature must be positive on controllable buses")
        if self.C0_hess is not None:
            Q0 = np.asarray(self.C0_hess, dtype=float)
            if Q0.shape != (2 * n, 2 * n) or np.linalg.eigvalsh((Q0 + Q0.T) / 2).min() < -1e-12:
                raise ValueError("C0_hess must be a symmetric PSD (2N, 2N) matrix")
            object.__setattr__(self, "C0_hess", (Q0 + Q0.T) / 2)
        if self.C0_lin is not None:
            object.__setattr__(self, "C0_lin", np.asarray(self.C0_lin, dtype=float).reshape(2 * n))
        if self.constraint_names and len(self.constraint_names) != self.n_dual:
            raise ValueError("constraint_names must name every constraint row")

    @property
    def n_bus(self) -> int:
        return self.model.n_bus

    @property
    def n_dual(self) -> int:
        return self.G.shape[0]

    @property
    def controllable(self) -> np.ndarray:
        return (self.p_max > self.p_min) | (self.q_max > self.q_min)

    @property
    def lower(self) -> np.ndarray:
        return np.concatenate([self.p_min, self.q_min])

    @property
    def upper(self) -> np.ndarray:
        return np.concatenate([self.p_max, self.q_max])

    @property
    def K(self) -> np.ndarray:
        """Constraint Jacobian on ``z = (p, q)``: ``[G A, G B]``."""
        if "K" not in self._cache:
            K = np.hstack([self.G @ self.model.A, self.G @ self.model.B])
            K.setflags(write=False)
            self._cache["K"] = K
        return self._cache["K"]

    @property
    def k0(self) -> np.ndarray:
        return self.G @ self.model.r0 + self.d

    @property
    def hessian(self) -> np.ndarray:
        """Hessian of the total cost on ``z = (p, q)``."""
        if "Q" not in self._cache:
            Q = np.diag(np.concatenate([2 * self.c2_p, 2 * self.c2_q]))
            if self.C0_hess is not None:
                Q = Q + self.C0_hess
            Q.setflags(write=False)
            self._cache["Q"] = Q
        return self._cache["Q"]

    @property
    def cost_linear(self) -> np.ndarray:
        c = np.concatenate([-2 * self.c2_p * self.p_target, -2 * self.c2_q * self.q_target])
        if self.C0_lin is not None:
            c = c + self.C0_lin
        return c


def voltage_band(n: int, v_lo: float | np.ndarray, v_hi: float | np.ndarray) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    """``G, d`` encoding ``v_lo <= |v| <= v_hi`` as ``G |v| + d <= 0``.

    Rows ``0..n-1`` are the upper limits, rows ``n..2n-1`` the lower limits.
    """
    v_lo = np.broadcast_to(np.asarray(v_lo, dtype=float), (n,))
    v_hi = np.broadcast_to(np.asarray(v_hi, dtype=float), (n,))
    if np.any(v_lo >= v_hi):
        raise ValueError("voltage band requires v_lo < v_hi")
    eye = np.eye(n)
    G = np.vstack([eye, -eye])
    d = np.concatenate([-v_hi, v_lo])
    names = tuple(f"hi_{i + 1}" for i in range(n)) + tuple(f"lo_{i + 1}" for i in range(n))
    return G, d, names


@dataclass(frozen=True)
class ControllerState:
    p: np.ndarray
    q: np.ndarray
    mu: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.q, self.mu])

    @classmethod
    def from_vector(cls, x: np.ndarray, n_bus: int) -> ControllerState:
        x = np.asarray(x, dtype=float)
        return cls(p=x[:n_bus].copy(), q=x[n_bus : 2 * n_bus].copy(), mu=x[2 * n_bus :].copy())


def initial_state(problem: OpfProblem, p: np.ndarray, q: np.ndarray) -> ControllerState:
    """Projected starting point with zero duals."""
    return project(problem, ControllerState(np.asarray(p, float), np.asarray(q, float), np.zeros(problem.n_dual)))


def project(problem: OpfProblem, state: ControllerState) -> ControllerState:
    return ControllerState(
        p=np.clip(state.p, problem.p_min, problem.p_max),
        q=np.clip(state.q, problem.q_min, problem.q_max),
        mu=np.maximum(state.mu, 0.0),
    )


def constraint(problem: OpfProblem, r: np.ndarray) -> np.ndarray:
    return problem.G @ r + problem.d


def objective(problem: OpfProblem, p: np.ndarray, q: np.ndarray) -> float:
    val = float(np.sum(problem.c2_p * (problem.p_target - p) ** 2 + problem.c2_q * (q - problem.q_target) ** 2))
    z = np.concatenate([p, q])
    if problem.C0_hess is not None:
        val += 0.5 * z @ problem.C0_hess @ z
    if problem.C0_lin is not None:
        val += problem.C0_lin @ z
    return val


def lagrangian(problem: OpfProblem, state: ControllerState) -> float:
    """Regularized Lagrangian with ``r`` from the linear model."""
    r = problem.model.evaluate(state.p, state.q)
    g = constraint(problem, r)
    return objective(problem, state.p, state.q) + state.mu @ g - 0.5 * problem.eta * state.mu @ state.mu


def lagrangian_gradients(
    problem: OpfProblem, state: ControllerState, r: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Partial gradients of the Lagrangian; the dual part is evaluated at the supplied ``r``."""
    n, m = problem.n_bus, problem.n_dual
    if state.p.shape != (n,) or state.q.shape != (n,) or state.mu.shape != (m,):
        raise ValueError("state dimensions do not match the problem")
    r = np.asarray(r, dtype=float)
    if r.shape != (problem.G.shape[1],):
        raise ValueError(f"r must have shape ({problem.G.shape[1]},), got {r.shape}")
    z = np.concatenate([state.p, state.q])
    grad_z = problem.hessian @ z + problem.cost_linear + problem.K.T @ state.mu
    grad_mu = constraint(problem, r) - problem.eta * state.mu
    return grad_z[:n], grad_z[n:], grad_mu


def primal_dual_step(
    problem: OpfProblem,
    state: ControllerState,
    r_feedback: np.ndarray,
    eps: float,
    dual_mask: np.ndarray | None = None,
) -> ControllerState:
    """One projected primal-dual iteration.

    Primal and dual parts are both computed from ``state``; the dual ascent
    uses the caller's ``r_feedback`` in place of the model prediction.
    Dual rows where ``dual_mask`` is False are held at zero.
    """
    gp, gq, gmu = lagrangian_gradients(problem, state, r_feedback)
    mu = np.maximum(state.mu + eps * gmu, 0.0)
    if dual_mask is not None:
        mu = np.where(dual_mask, mu, 0.0)
    return ControllerState(
        p=np.clip(state.p - eps * gp, problem.p_min, problem.p_max),
        q=np.clip(state.q - eps * gq, problem.q_min, problem.q_max),
        mu=mu,
    )


def affine_map(problem: OpfProblem) -> tuple[np.ndarray, np.ndarray]:
    """``H, b`` with ``F(x) = H x + b`` on the full stacked vector."""
    K = problem.K
    m = problem.n_dual
    H = np.block([[problem.hessian, K.T], [-K, problem.eta * np.eye(m)]])
    b = np.concatenate([problem.cost_linear, -problem.k0])
    return H, b


def gradient_map(problem: OpfProblem, x: np.ndarray, r: np.ndarray | None = None) -> np.ndarray:
    """``F(x)``; with ``r`` given, the dual block uses it instead of the model (the feedback operator)."""
    state = ControllerState.from_vector(x, problem.n_bus)
    if r is None:
        r = problem.model.evaluate(state.p, state.q)
    gp, gq, gmu = lagrangian_gradients(problem, state, r)
    return np.concatenate([gp, gq, -gmu])


def free_coordinates(problem: OpfProblem) -> np.ndarray:
    """Indices of the stacked vector not pinned by a degenerate box."""
    width = problem.upper - problem.lower
    return np.concatenate([np.flatnonzero(width > 0), 2 * problem.n_bus + np.arange(problem.n_dual)])


def _power_sigma_max(H: np.ndarray, tol: float = 1e-10, max_iter: int = 100_000) -> float:
    HtH = H.T @ H
    v = np.linspace(1.0, 2.0, H.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = HtH @ v
        lam_new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(lam_new - lam) <= tol * abs(lam_new):
            lam = lam_new
            break
        lam = lam_new
    return float(np.sqrt(max(lam, 0.0)))


@dataclass(frozen=True)
class ConvergenceCertificate:
    """Lipschitz and strong-monotonicity constants of the gradient map."""

    L: float
    M_strong: float
    eps_max: float

    def gamma(self, eps: float) -> float:
        """Per-step contraction factor of the squared distance to the saddle point."""
        return eps**2 * self.L**2 - 2 * eps * self.M_strong + 1

    def default_eps(self) -> float:
        return 0.9 * self.eps_max

    def limit_bound(self, eps: float, rho: float) -> float:
        """Asymptotic squared-distance bound under a feedback perturbation of size ``rho``."""
        den = 2 * eps * self.M_strong - eps**2 * self.L**2
        if den <= 0:
            return np.inf
        return eps**2 * rho / den


def certify_step(problem: OpfProblem) -> ConvergenceCertificate:
    """Step-size certificate on the free coordinates of ``F(x) = H x + b``.

    The symmetric part of ``H`` is ``blockdiag(Q, eta I)`` because the
    constraint blocks are skew, so the strong-monotonicity constant is exactly
    ``min(lambda_min(Q), eta)``.
    """
    H, _ = affine_map(problem)
    idx = free_coordinates(problem)
    Hf = H[np.ix_(idx, idx)]
    nz = int(np.count_nonzero(idx < 2 * problem.n_bus))
    Qf = Hf[:nz, :nz]
    lam_q = float(np.linalg.eigvalsh(Qf).min()) if nz else np.inf
    M = min(lam_q, problem.eta)
    if not M > 0:
        raise CertificateUnavailable(f"cost Hessian is not positive definite on free coordinates (min eig {lam_q:.3g})")
    L = _power_sigma_max(Hf)
    return ConvergenceCertificate(L=L, M_strong=M, eps_max=2 * M / L**2)


def kkt_residual(problem: OpfProblem, state: ControllerState) -> float:
    """Natural residual ``||x - P(x - F(x))||_inf`` of the saddle-point conditions."""
    x = state.as_vector()
    y = ControllerState.from_vector(x - gradient_map(problem, x), problem.n_bus)
    return float(np.max(np.abs(x - project(problem, y).as_vector())))


def saddle_point(problem: OpfProblem, tol: float = 1e-12, max_active_set_iter: int = 100) -> ControllerState:
    """Saddle point of the regularized linear-model problem by a dense KKT solve.

    Maximizing out the duals gives ``mu = max(0, (K z + k0) / eta)`` and a
    piecewise-quadratic primal problem; a bounded quasi-Newton solve picks the
    active sets, and active-set Newton steps then solve the KKT system exactly.
    """
    Q, c, K, k0, eta = problem.hessian, problem.cost_linear, problem.K, problem.k0, problem.eta
    lo, hi = problem.lower, problem.upper

    def fun(z: np.ndarray) -> tuple[float, np.ndarray]:
        viol = np.maximum(K @ z + k0, 0.0)
        val = 0.5 * z @ Q @ z + c @ z + 0.5 / eta * viol @ viol
        return val, Q @ z + c + K.T @ viol / eta

    z0 = np.clip(np.concatenate([problem.p_target, problem.q_target]), lo, hi)
    res = optimize.minimize(
        fun, z0, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
        options={"maxiter": 20_000, "ftol": 1e-15, "gtol": 1e-12},
    )
    z = np.clip(res.x, lo, hi)

    def residual(z: np.ndarray) -> float:
        return float(np.max(np.abs(z - np.clip(z - fun(z)[1], lo, hi))))

    fixed = hi <= lo
    prev = None
    for _ in range(max_active_set_iter):
        grad = fun(z)[1]
        at_lo = ~fixed & (z <= lo) & (grad >= 0)
        at_hi = ~fixed & (z >= hi) & (grad <= 0)
        free = ~(fixed | at_lo | at_hi)
        rows = K @ z + k0 > 0
        key = (free.tobytes(), at_lo.tobytes(), rows.tobytes())
        if key == prev:
            break
        prev = key
        zb = z.copy()
        Kr = K[rows]
        Hff = Q[np.ix_(free, free)] + Kr[:, free].T @ Kr[:, free] / eta
        rhs = -(c[free] + Q[np.ix_(free, ~free)] @ zb[~free] + Kr[:, free].T @ (Kr[:, ~free] @ zb[~free] + k0[rows]) / eta)
        z_new = zb.copy()
        z_new[free] = np.linalg.solve(Hff, rhs)
        if residual(np.clip(z_new, lo, hi)) <= residual(z) or np.all((z_new >= lo) & (z_new <= hi)):
            z = np.clip(z_new, lo, hi)
        else:
            break
    scale = max(1.0, float(np.max(np.abs(c))), float(np.max(np.abs(k0))) / eta)
    if residual(z) > 1e-9 * scale:
        raise RuntimeError(f"KKT solve did not converge (natural residual {residual(z):.3g})")
    n = problem.n_bus
    mu = np.maximum(K @ z + k0, 0.0) / eta
    return ControllerState(p=z[:n].copy(), q=z[n:].copy(), mu=mu)
