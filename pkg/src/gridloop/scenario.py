"""Scenario files: one closed-loop experiment (case, problem, sensors, loop settings)."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from gridloop import controller, loop
from gridloop.controller import OpfProblem
from gridloop.loop import LoopConfig, Mode
from gridloop.netmodel import AdmittanceModel, LinearPFModel, NetworkCase, build_admittance, linearize, load_case
from gridloop.sensing import MeasurementPlan, default_sensor_buses

BUNDLED_PREFIX = "bundled:"

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}

SCENARIO_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["case_path", "problem"],
    "properties": {
        "name": {"type": "string"},
        "case_path": {"type": "string", "minLength": 1},
        "linearization_point": {"enum": ["zero", "nominal"]},
        "problem": {
            "type": "object",
            "additionalProperties": False,
            "required": ["c2_p", "c2_q", "controllable"],
            "properties": {
                "v_lo": _NUM,
                "v_hi": _NUM,
                "eta": _NONNEG,
                "c2_p": _POS,
                "c2_q": _POS,
                "controllable": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["bus", "p_min", "p_max", "q_min", "q_max"],
                        "properties": {
                            "bus": {"type": "integer", "minimum": 1},
                            "p_min": _NUM,
                            "p_max": _NUM,
                            "q_min": _NUM,
                            "q_max": _NUM,
                            "c2_p": _POS,
                            "c2_q": _POS,
                            "p_target": _NUM,
                            "q_target": _NUM,
                        },
                    },
                },
            },
        },
        "plan": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "v_sensors": {
                    "oneOf": [
                        {"const": "default"},
                        {"type": "array", "items": {"type": "integer", "minimum": 1}, "uniqueItems": True},
                    ]
                },
                "sigma_v": _NONNEG,
                "sigma_p": _NONNEG,
                "sigma_q": _NONNEG,
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "loop": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": [m.value for m in Mode]},
                "eps": {"oneOf": [{"const": "auto"}, _POS]},
                "max_iters": {"type": "integer", "minimum": 1},
                "stop_tol": _NONNEG,
                "stop_window": {"type": "integer", "minimum": 1},
                "sensed_source": {"enum": ["measurement", "estimate"]},
            },
        },
        "outputs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"trace": {"type": "string"}, "summary": {"type": "string"}},
        },
    },
}

DEFAULTS: dict[str, Any] = {
    "linearization_point": "zero",
    "problem": {"v_lo": 0.95, "v_hi": 1.05, "eta": 1e-3},
    "plan": {"v_sensors": "default", "sigma_v": 0.01, "sigma_p": 0.5, "sigma_q": 0.5, "seed": 0},
    "loop": {
        "mode": "se_feedback",
        "eps": "auto",
        "max_iters": 5000,
        "stop_tol": 1e-7,
        "stop_window": 1,
        "sensed_source": "measurement",
    },
    "outputs": {"trace": "trace.csv", "summary": "summary.json"},
}


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario file."""


@dataclass(frozen=True)
class Scenario:
    """A validated scenario with every default filled in.

    ``case_path`` is kept as written; relative paths resolve against
    ``base_dir`` (the scenario file's directory).
    """

    case_path: str
    linearization_point: str
    problem: dict[str, Any]
    plan: dict[str, Any]
    loop: dict[str, Any]
    outputs: dict[str, Any]
    name: str = ""
    base_dir: Path = Path(".")

    def to_dict(self) -> dict[str, Any]:
        out = {
            "name": self.name,
            "case_path": self.case_path,
            "linearization_point": self.linearization_point,
            "problem": copy.deepcopy(self.problem),
            "plan": copy.deepcopy(self.plan),
            "loop": copy.deepcopy(self.loop),
            "outputs": copy.deepcopy(self.outputs),
        }
        if not self.name:
            del out["name"]
        return out

    def resolved_case_path(self) -> Path:
        return resolve_path(self.case_path, self.base_dir)

    def with_overrides(self, seed: int | None = None, mode: str | None = None) -> Scenario:
        data = self.to_dict()
        if seed is not None:
            data["plan"]["seed"] = int(seed)
        if mode is not None:
            data["loop"]["mode"] = mode
        return scenario_from_dict(data, self.base_dir)


def bundled(name: str) -> Path:
    """Path of a data file shipped with the package."""
    return Path(str(resources.files("gridloop") / "data" / name))


def resolve_path(path: str, base_dir: Path) -> Path:
    if path.startswith(BUNDLED_PREFIX):
        return bundled(path[len(BUNDLED_PREFIX):])
    p = Path(path)
    return p if p.is_absolute() else base_dir / p


def _line_of(text: str, path: list[Any]) -> int | None:
    """Best-effort line number of the element at a JSON path."""
    pos, found = 0, None
    for key in path:
        if not isinstance(key, str):
            continue
        hit = text.find(json.dumps(key), pos)
        if hit < 0:
            break
        pos, found = hit, hit
    return None if found is None else text.count("\n", 0, found) + 1


def _merge_defaults(data: dict[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(data)
    for key, value in DEFAULTS.items():
        if isinstance(value, dict):
            out[key] = {**value, **out.get(key, {})}
        else:
            out.setdefault(key, value)
    return out


def scenario_from_dict(data: dict[str, Any], base_dir: str | Path = ".", text: str | None = None) -> Scenario:
    try:
        jsonschema.validate(data, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = list(exc.absolute_path)
        where = "/".join(str(p) for p in path) or "<root>"
        if exc.validator == "additionalProperties" and isinstance(exc.instance, dict):
            # point at the first unexpected key rather than its parent object
            allowed = exc.schema.get("properties", {})
            extra = [k for k in exc.instance if k not in allowed]
            path += extra[:1]
        line = _line_of(text, path) if text is not None else None
        prefix = f"line {line}: " if line else ""
        raise ScenarioError(f"{prefix}scenario schema violation at {where}: {exc.message}") from None
    full = _merge_defaults(data)
    prob = full["problem"]
    if not prob["v_lo"] < prob["v_hi"]:
        raise ScenarioError(f"voltage band needs v_lo < v_hi (got {prob['v_lo']}, {prob['v_hi']})")
    if not prob["eta"] > 0:
        raise ScenarioError("eta must be > 0: the step-size certificate needs a strongly concave dual")
    buses = [c["bus"] for c in prob["controllable"]]
    if len(set(buses)) != len(buses):
        raise ScenarioError("a bus appears twice in problem/controllable")
    for c in prob["controllable"]:
        if c["p_min"] > c["p_max"] or c["q_min"] > c["q_max"]:
            raise ScenarioError(f"empty box at controllable bus {c['bus']}")
    return Scenario(
        case_path=full["case_path"],
        linearization_point=full["linearization_point"],
        problem=prob,
        plan=full["plan"],
        loop=full["loop"],
        outputs=full["outputs"],
        name=full.get("name", ""),
        base_dir=Path(base_dir),
    )


def load_scenario(path: str | Path) -> Scenario:
    path = resolve_path(str(path), Path("."))
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}: malformed scenario file: {exc.msg}") from None
    try:
        return scenario_from_dict(data, path.parent, text)
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class Setup:
    """Everything a loop run needs, built from a scenario."""

    scenario: Scenario
    case: NetworkCase
    admittance: AdmittanceModel
    model: LinearPFModel
    problem: OpfProblem
    plan: MeasurementPlan
    config: LoopConfig

    @property
    def v_lo(self) -> float:
        return float(self.scenario.problem["v_lo"])

    @property
    def v_hi(self) -> float:
        return float(self.scenario.problem["v_hi"])


def build_problem(scenario: Scenario, case: NetworkCase, model: LinearPFModel) -> OpfProblem:
    """Uncontrollable buses get a degenerate box at their nominal injection."""
    n = case.n_bus
    prob = scenario.problem
    p_nom, q_nom = case.nominal_p, case.nominal_q
    p_min, p_max, q_min, q_max = p_nom.copy(), p_nom.copy(), q_nom.copy(), q_nom.copy()
    c2_p, c2_q = np.zeros(n), np.zeros(n)
    p_target, q_target = p_nom.copy(), q_nom.copy()
    for c in prob["controllable"]:
        if c["bus"] > n:
            raise ScenarioError(f"controllable bus {c['bus']} is not in the case (N = {n})")
        i = case.index(c["bus"])
        p_min[i], p_max[i], q_min[i], q_max[i] = c["p_min"], c["p_max"], c["q_min"], c["q_max"]
        c2_p[i] = c.get("c2_p", prob["c2_p"])
        c2_q[i] = c.get("c2_q", prob["c2_q"])
        p_target[i] = c.get("p_target", p_nom[i])
        q_target[i] = c.get("q_target", q_nom[i])
    G, d, names = controller.voltage_band(n, prob["v_lo"], prob["v_hi"])
    return OpfProblem(
        model=model, c2_p=c2_p, p_target=p_target, c2_q=c2_q,
        p_min=p_min, p_max=p_max, q_min=q_min, q_max=q_max,
        G=G, d=d, eta=float(prob["eta"]), constraint_names=names, q_target=q_target,
    )


def build_plan(scenario: Scenario, case: NetworkCase) -> MeasurementPlan:
    plan = scenario.plan
    sensors = default_sensor_buses(case) if plan["v_sensors"] == "default" else tuple(plan["v_sensors"])
    try:
        return MeasurementPlan(
            n_bus=case.n_bus, v_sensors=sensors, sigma_v=plan["sigma_v"],
            sigma_p=plan["sigma_p"], sigma_q=plan["sigma_q"], seed=plan["seed"],
        )
    except ValueError as exc:
        raise ScenarioError(f"plan: {exc}") from None


def build(scenario: Scenario, case: NetworkCase | None = None) -> Setup:
    """Load the case, linearize it and assemble problem, plan and loop settings."""
    case = case if case is not None else load_case(scenario.resolved_case_path())
    adm = build_admittance(case)
    point = None if scenario.linearization_point == "zero" else (case.nominal_p, case.nominal_q)
    model = linearize(case, adm, point)
    problem = build_problem(scenario, case, model)
    loop = scenario.loop
    config = LoopConfig(
        mode=Mode(loop["mode"]),
        eps=None if loop["eps"] == "auto" else float(loop["eps"]),
        max_iters=int(loop["max_iters"]),
        stop_tol=float(loop["stop_tol"]),
        plan=build_plan(scenario, case),
        stop_window=int(loop["stop_window"]),
        sensed_source=loop["sensed_source"],
    )
    return Setup(scenario, case, adm, model, problem, config.plan, config)


@dataclass
class Outcome:
    trace: loop.LoopTrace
    summary: dict[str, Any]
    certificate: controller.ConvergenceCertificate
    reference: controller.ControllerState
    check: loop.BoundCheck


def execute(setup: Setup) -> Outcome:
    """Run the loop and check the trajectory against the asymptotic bound."""
    certificate = controller.certify_step(setup.problem)
    reference = controller.saddle_point(setup.problem)
    trace = loop.run(setup.problem, setup.case, setup.config, setup.admittance, reference, certificate)
    check = loop.certify_bound(trace, certificate, reference)
    summary = loop.summarize(trace, setup.v_lo, setup.v_hi, check, certificate, setup.plan.v_sensors)
    summary["seed"] = setup.plan.seed
    summary["sensors"] = list(setup.plan.v_sensors)
    return Outcome(trace, summary, certificate, reference, check)
