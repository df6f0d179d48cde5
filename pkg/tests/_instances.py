"""Small random networks and OPF instances shared by the test modules."""

from __future__ import annotations

import numpy as np

from gridloop import controller
from gridloop.netmodel import LinearPFModel, build_admittance, case_from_dict, linearize


def two_bus_dict(z=complex(0.01, 0.02), p=0.0, q=0.0, v0=1.0) -> dict:
    return {
        "base_mva": 1.0,
        "base_kv": 4.16,
        "substation": {"id": 0, "voltage_re": v0, "voltage_im": 0.0},
        "buses": [{"id": 1, "p_nom": p, "q_nom": q}],
        "lines": [{"from": 0, "to": 1, "r": z.real, "x": z.imag}],
    }


def radial_case_dict(n_bus: int, rng: np.random.Generator, v0: float = 1.02, load_scale: float = 0.3) -> dict:
    """Random tree: bus i hangs off a random earlier bus; mostly exporting (PV-heavy) buses."""
    lines = []
    for i in range(1, n_bus + 1):
        parent = int(rng.integers(0, i))
        z = complex(0.01, 0.02) * rng.uniform(0.5, 1.5)
        lines.append({"from": parent, "to": i, "r": z.real, "x": z.imag, "b_shunt": 0.0})
    buses = [
        {"id": i, "p_nom": float(rng.uniform(0.2, 1.0) * load_scale), "q_nom": float(rng.uniform(-0.05, 0.05))}
        for i in range(1, n_bus + 1)
    ]
    return {
        "base_mva": 1.0,
        "base_kv": 4.16,
        "substation": {"id": 0, "voltage_re": v0, "voltage_im": 0.0},
        "buses": buses,
        "lines": lines,
    }


def random_instance(
    n_bus: int = 5,
    seed: int = 0,
    eta: float = 0.5,
    c2: float = 0.5,
    system_cost: bool = False,
    tight: float = 0.5,
):
    """Case plus certified quadratic OPF problem with some over-voltage rows active.

    ``v_hi`` sits ``tight`` of the way from V0 to the uncontrolled maximum,
    so the voltage limit binds at the nominal injections.
    """
    rng = np.random.default_rng(seed)
    case = case_from_dict(radial_case_dict(n_bus, rng))
    adm = build_admittance(case)
    model = linearize(case, adm)
    p_nom, q_nom = case.nominal_p, case.nominal_q
    v_nom = model.evaluate(p_nom, q_nom)
    v_hi = abs(case.v0) + tight * (v_nom.max() - abs(case.v0))
    G, d, names = controller.voltage_band(n_bus, 0.9, v_hi)
    c2_p = c2 * rng.uniform(0.8, 1.2, n_bus)
    c2_q = c2 * rng.uniform(0.8, 1.2, n_bus)
    C0_hess = C0_lin = None
    if system_cost:
        R = rng.normal(size=(2 * n_bus, 2 * n_bus)) * 0.1
        C0_hess = R @ R.T
        C0_lin = rng.normal(size=2 * n_bus) * 0.1
    problem = controller.OpfProblem(
        model=model, c2_p=c2_p, p_target=p_nom, c2_q=c2_q,
        p_min=p_nom - 0.5, p_max=p_nom, q_min=q_nom - 0.2, q_max=q_nom + 0.2,
        G=G, d=d, eta=eta, C0_hess=C0_hess, C0_lin=C0_lin, constraint_names=names, q_target=q_nom,
    )
    return case, adm, problem


def toy_problem(c2_p: float, c2_q: float, a: float, b: float, eta: float, g: float = 1.0) -> controller.OpfProblem:
    """One bus with wide boxes: ``Q = diag(2 c2_p, 2 c2_q)``, ``K = g [a b]``, one constraint row."""
    model = LinearPFModel(A=np.array([[a]]), B=np.array([[b]]), r0=np.array([0.0]))
    one = np.ones(1)
    return controller.OpfProblem(
        model=model, c2_p=c2_p * one, p_target=0.3 * one, c2_q=c2_q * one,
        p_min=-10 * one, p_max=10 * one, q_min=-10 * one, q_max=10 * one,
        G=np.array([[g]]), d=np.array([-0.1]), eta=eta,
    )
