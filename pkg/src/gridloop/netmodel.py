"""Network model: case files, admittance matrix and linearized voltage model."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

SUBSTATION_ID = 0

CASE_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["base_mva", "base_kv", "substation", "buses", "lines"],
    "properties": {
        "name": {"type": "string"},
        "units": {"enum": ["pu", "si"]},
        "base_mva": {"type": "number", "exclusiveMinimum": 0},
        "base_kv": {"type": "number", "exclusiveMinimum": 0},
        "substation": {
            "type": "object",
            "additionalProperties": False,
            "required": ["id", "voltage_re", "voltage_im"],
            "properties": {
                "id": {"const": 0},
                "voltage_re": {"type": "number"},
                "voltage_im": {"type": "number"},
            },
        },
        "buses": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id", "p_nom", "q_nom"],
                "properties": {
                    "id": {"type": "integer", "minimum": 1},
                    "label": {"type": "string"},
                    "p_nom": {"type": "number"},
                    "q_nom": {"type": "number"},
                },
            },
        },
        "lines": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["from", "to", "r", "x"],
                "properties": {
                    "from": {"type": "integer", "minimum": 0},
                    "to": {"type": "integer", "minimum": 0},
                    "r": {"type": "number"},
                    "x": {"type": "number"},
                    "b_shunt": {"type": "number"},
                },
            },
        },
    },
}


class CaseError(ValueError):
    """Raised when a case file cannot be parsed or fails validation."""


@dataclass(frozen=True)
class Bus:
    id: int
    nominal_p: float
    nominal_q: float
    label: str = ""


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    series_impedance: complex
    shunt_admittance: complex = 0j

    @property
    def series_admittance(self) -> complex:
        return 1.0 / self.series_impedance


@dataclass(frozen=True)
class NetworkCase:
    """Validated radial (or meshed) single-phase equivalent network in per-unit.

    Bus ids run 1..N and bus ``i`` occupies row ``i - 1`` of every vector;
    id 0 is the slack substation with fixed phasor ``v0``.
    """

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    v0: complex = 1.0 + 0j
    base_mva: float = 1.0
    base_kv: float = 1.0
    name: str = ""

    def __post_init__(self) -> None:
        _validate(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def bus_ids(self) -> np.ndarray:
        return np.array([b.id for b in self.buses], dtype=int)

    @property
    def nominal_p(self) -> np.ndarray:
        return np.array([b.nominal_p for b in self.buses])

    @property
    def nominal_q(self) -> np.ndarray:
        return np.array([b.nominal_q for b in self.buses])

    def index(self, bus_id: int) -> int:
        if not 1 <= bus_id <= self.n_bus:
            raise KeyError(f"unknown bus id {bus_id}")
        return bus_id - 1

    def depth(self) -> np.ndarray:
        """Hop count from the substation for every bus."""
        adj = _adjacency(self)
        dist = {SUBSTATION_ID: 0}
        queue = deque([SUBSTATION_ID])
        while queue:
            u = queue.popleft()
            for w in adj[u]:
                if w not in dist:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        return np.array([dist[b.id] for b in self.buses], dtype=int)


def _adjacency(case: NetworkCase) -> dict[int, set[int]]:
    adj: dict[int, set[int]] = {SUBSTATION_ID: set()}
    for b in case.buses:
        adj[b.id] = set()
    for ln in case.lines:
        adj.setdefault(ln.from_bus, set()).add(ln.to_bus)
        adj.setdefault(ln.to_bus, set()).add(ln.from_bus)
    return adj


def _validate(case: NetworkCase) -> None:
    ids = [b.id for b in case.buses]
    seen: set[int] = set()
    for i in ids:
        if i in seen:
            raise CaseError(f"duplicate bus id {i}")
        if i == SUBSTATION_ID:
            raise CaseError("bus id 0 is reserved for the substation")
        seen.add(i)
    if not ids:
        raise CaseError("case has no PQ buses")
    if sorted(ids) != list(range(1, len(ids) + 1)):
        missing = sorted(set(range(1, len(ids) + 1)) - seen)
        raise CaseError(f"bus ids must be contiguous 1..{len(ids)}; missing {missing}")
    known = seen | {SUBSTATION_ID}
    for k, ln in enumerate(case.lines):
        for end in (ln.from_bus, ln.to_bus):
            if end not in known:
                raise CaseError(f"line {k} ({ln.from_bus}->{ln.to_bus}) references unknown bus {end}")
        if ln.from_bus == ln.to_bus:
            raise CaseError(f"line {k} is a self-loop at bus {ln.from_bus}")
        if ln.series_impedance == 0:
            raise CaseError(f"line {k} ({ln.from_bus}->{ln.to_bus}) has zero series impedance")
    adj = _adjacency(case)
    reached = {SUBSTATION_ID}
    queue = deque([SUBSTATION_ID])
    while queue:
        u = queue.popleft()
        for w in adj[u] - reached:
            reached.add(w)
            queue.append(w)
    unreachable = sorted(seen - reached)
    if unreachable:
        raise CaseError(f"bus {unreachable[0]} is not connected to the substation (unreachable: {unreachable})")


def case_from_dict(data: dict[str, Any]) -> NetworkCase:
    try:
        jsonschema.validate(data, CASE_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CaseError(f"case schema violation at {where}: {exc.message}") from None

    base_mva = float(data["base_mva"])
    base_kv = float(data["base_kv"])
    if data.get("units", "pu") == "si":
        z_base = base_kv**2 / base_mva
        z_scale, y_scale, s_scale = 1.0 / z_base, z_base, 1.0 / base_mva
    else:
        z_scale = y_scale = s_scale = 1.0

    buses = tuple(
        Bus(int(b["id"]), float(b["p_nom"]) * s_scale, float(b["q_nom"]) * s_scale, b.get("label", ""))
        for b in sorted(data["buses"], key=lambda b: b["id"])
    )
    lines = tuple(
        Line(
            int(ln["from"]),
            int(ln["to"]),
            complex(ln["r"], ln["x"]) * z_scale,
            1j * float(ln.get("b_shunt", 0.0)) * y_scale,
        )
        for ln in data["lines"]
    )
    sub = data["substation"]
    return NetworkCase(
        buses=buses,
        lines=lines,
        v0=complex(sub["voltage_re"], sub["voltage_im"]),
        base_mva=base_mva,
        base_kv=base_kv,
        name=data.get("name", ""),
    )


def load_case(path: str | Path) -> NetworkCase:
    """Parse and validate a JSON case file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CaseError(f"{path}:{exc.lineno}:{exc.colno}: malformed case file: {exc.msg}") from None
    return case_from_dict(data)


def case_to_dict(case: NetworkCase) -> dict[str, Any]:
    return {
        "name": case.name,
        "units": "pu",
        "base_mva": case.base_mva,
        "base_kv": case.base_kv,
        "substation": {"id": 0, "voltage_re": case.v0.real, "voltage_im": case.v0.imag},
        "buses": [
            {"id": b.id, "label": b.label, "p_nom": b.nominal_p, "q_nom": b.nominal_q} for b in case.buses
        ],
        "lines": [
            {
                "from": ln.from_bus,
                "to": ln.to_bus,
                "r": ln.series_impedance.real,
                "x": ln.series_impedance.imag,
                "b_shunt": ln.shunt_admittance.imag,
            }
            for ln in case.lines
        ],
    }


@dataclass(frozen=True, eq=False)
class AdmittanceModel:
    """Reduced nodal admittance ``Y`` over PQ buses plus its slack coupling."""

    Y: np.ndarray
    y_bar: np.ndarray
    y00: complex
    v0: complex
    shunt: np.ndarray = field(repr=False)

    @property
    def n_bus(self) -> int:
        return self.Y.shape[0]

    @cached_property
    def zbus(self) -> np.ndarray:
        Z = np.linalg.inv(self.Y)
        Z.setflags(write=False)
        return Z


def build_admittance(case: NetworkCase) -> AdmittanceModel:
    n = case.n_bus
    full = np.zeros((n + 1, n + 1), dtype=complex)
    shunt = np.zeros(n + 1, dtype=complex)
    for ln in case.lines:
        i, j = ln.from_bus, ln.to_bus
        y = ln.series_admittance
        full[i, j] -= y
        full[j, i] -= y
        full[i, i] += y
        full[j, j] += y
        # pi model: half the line charging at each end
        shunt[i] += ln.shunt_admittance / 2
        shunt[j] += ln.shunt_admittance / 2
    full[np.diag_indices(n + 1)] += shunt
    Y, y_bar, node_shunt = full[1:, 1:].copy(), full[1:, 0].copy(), shunt[1:].copy()
    for arr in (Y, y_bar, node_shunt):
        arr.setflags(write=False)
    return AdmittanceModel(Y=Y, y_bar=y_bar, y00=complex(full[0, 0]), v0=case.v0, shunt=node_shunt)


@dataclass(frozen=True)
class LinearPFModel:
    """Affine model ``|v| ~= A p + B q + r0`` of bus voltage magnitudes."""

    A: np.ndarray
    B: np.ndarray
    r0: np.ndarray
    quantity_kind: str = "voltage_magnitude"
    point_p: np.ndarray | None = None
    point_q: np.ndarray | None = None

    def __post_init__(self) -> None:
        m, n = self.A.shape
        if self.B.shape != (m, n) or self.r0.shape != (m,):
            raise ValueError(f"inconsistent shapes A{self.A.shape} B{self.B.shape} r0{self.r0.shape}")
        if self.quantity_kind != "voltage_magnitude":
            raise ValueError(f"unsupported quantity kind {self.quantity_kind!r}")

    @property
    def n_bus(self) -> int:
        return self.A.shape[1]

    def evaluate(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        return self.A @ p + self.B @ q + self.r0


def linearize(
    case: NetworkCase,
    admittance: AdmittanceModel,
    point: tuple[np.ndarray, np.ndarray] | None = None,
    delta: float = 1e-5,
    fit_tolerance: float = 1e-6,
) -> LinearPFModel:
    """Voltage-magnitude sensitivities by central differences of the AC solver.

    ``point`` defaults to zero net injection. Raises
    :class:`~gridloop.acpf.PowerFlowDivergence` if the AC power flow fails
    at (or next to) the linearization point.
    """
    from gridloop.acpf import solve_pf

    n = case.n_bus
    if point is None:
        p0, q0 = np.zeros(n), np.zeros(n)
    else:
        p0, q0 = (np.asarray(a, dtype=float).copy() for a in point)
    # mismatch cannot drop below the rounding floor of Y @ v
    tol = max(1e-12, 64 * np.finfo(float).eps * np.abs(admittance.Y).max() * abs(case.v0))

    def vmag(p: np.ndarray, q: np.ndarray) -> np.ndarray:
        return solve_pf(admittance, (p, q), case.v0, tol=tol, max_iter=500).v_mag

    base = vmag(p0, q0)
    A = np.empty((n, n))
    B = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = delta
        A[:, j] = (vmag(p0 + e, q0) - vmag(p0 - e, q0)) / (2 * delta)
        B[:, j] = (vmag(p0, q0 + e) - vmag(p0, q0 - e)) / (2 * delta)
    r0 = base - A @ p0 - B @ q0
    fit = np.max(np.abs(A @ p0 + B @ q0 + r0 - base))
    if fit > fit_tolerance:
        raise ValueError(f"linear model misses the linearization point by {fit:.3g} pu")
    for arr in (A, B, r0):
        arr.setflags(write=False)
    return LinearPFModel(A=A, B=B, r0=r0, point_p=p0, point_q=q0)
