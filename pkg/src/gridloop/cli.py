"""Command-line front end: ``python -m gridloop {pf,se,bounds,run,echo-config}``.

Exit codes: 0 success; 1 the computation failed (power-flow divergence, an
unobservable plan, or a run that did not converge); 2 bad input (unreadable
or invalid case/scenario files, bad arguments).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from gridloop import acpf, controller, estimator, loop
from gridloop.netmodel import CaseError, build_admittance, load_case
from gridloop.scenario import Scenario, ScenarioError, build, execute, load_scenario, resolve_path
from gridloop.sensing import take_measurements

log = logging.getLogger("gridloop")

EXIT_OK, EXIT_FAILED, EXIT_INPUT = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class InputError(Exception):
    pass


def configure_logging(env: dict[str, str] | None = None) -> None:
    value = (env if env is not None else os.environ).get("GRIDLOOP_LOG", "warning").strip().lower()
    if value not in LOG_LEVELS:
        raise InputError(f"GRIDLOOP_LOG must be one of {', '.join(LOG_LEVELS)} (got {value!r})")
    logging.basicConfig(level=LOG_LEVELS[value], format="%(levelname)s %(name)s: %(message)s", force=True)


def _scenario(args: argparse.Namespace) -> Scenario:
    sc = load_scenario(args.scenario)
    sc = sc.with_overrides(seed=getattr(args, "seed_override", None), mode=getattr(args, "mode_override", None))
    return sc


def _setup(args: argparse.Namespace, sc: Scenario | None = None):
    sc = sc or _scenario(args)
    case = load_case(resolve_path(args.case, Path("."))) if getattr(args, "case", None) else None
    return build(sc, case)


def cmd_pf(args: argparse.Namespace) -> int:
    case = load_case(resolve_path(args.case, Path(".")))
    adm = build_admittance(case)
    if args.injections == "zero":
        p, q = np.zeros(case.n_bus), np.zeros(case.n_bus)
    else:
        p, q = case.nominal_p * args.scale, case.nominal_q * args.scale
    try:
        sol = acpf.solve_pf(adm, (p, q), case.v0)
    except acpf.PowerFlowDivergence as exc:
        print(f"power flow diverged: {exc}", file=sys.stderr)
        return EXIT_FAILED
    print(f"# {case.name or 'case'}: {case.n_bus} buses, {sol.iterations} iterations, residual {sol.residual:.3e} pu")
    print(f"{'bus':>4} {'label':>6} {'|v| pu':>10} {'angle deg':>10}")
    for b, v in zip(case.buses, sol.v):
        print(f"{b.id:>4} {b.label:>6} {abs(v):10.6f} {np.degrees(np.angle(v)):10.4f}")
    return EXIT_OK


def cmd_se(args: argparse.Namespace) -> int:
    """One estimate at the loop's starting point (nominal injections projected onto the boxes)."""
    setup = _setup(args)
    case, plan = setup.case, setup.plan
    start = controller.initial_state(setup.problem, case.nominal_p, case.nominal_q)
    try:
        sol = acpf.solve_pf(setup.admittance, (start.p, start.q), case.v0)
    except acpf.PowerFlowDivergence as exc:
        print(f"power flow diverged: {exc}", file=sys.stderr)
        return EXIT_FAILED
    snap = take_measurements(plan, (start.p, start.q, sol.v_mag), 0, (case.nominal_p, case.nominal_q))
    problem = estimator.assemble(plan, snap, setup.model, (case.nominal_p, case.nominal_q))
    if not estimator.check_observability(problem.H):
        print("measurement plan leaves the state unobservable", file=sys.stderr)
        return EXIT_FAILED
    res = estimator.solve_wls(problem)
    err = np.abs(res.v_hat - sol.v_mag) / sol.v_mag
    print(f"# sensors {list(plan.v_sensors)}, seed {plan.seed}, wls cost {res.wls_cost:.4g}, "
          f"gain condition ~{res.condition_estimate:.3g}")
    print(f"{'bus':>4} {'v_true':>10} {'v_meas':>10} {'v_hat':>10} {'err %':>8}")
    for i, b in enumerate(case.buses):
        meas = f"{snap.v_meas[b.id]:10.6f}" if b.id in snap.v_meas else f"{'':>10}"
        print(f"{b.id:>4} {sol.v_mag[i]:10.6f} {meas} {res.v_hat[i]:10.6f} {100 * err[i]:8.3f}")
    print(f"# average error {100 * err.mean():.3f} %, max error {100 * err.max():.3f} %")
    return EXIT_OK


def cmd_bounds(args: argparse.Namespace) -> int:
    setup = _setup(args)
    cert = controller.certify_step(setup.problem)
    eps = cert.default_eps() if setup.config.eps is None else setup.config.eps
    print(f"L         {cert.L:.10g}")
    print(f"M_strong  {cert.M_strong:.10g}")
    print(f"eps_max   {cert.eps_max:.10g}")
    print(f"eps       {eps:.10g}")
    print(f"gamma     {cert.gamma(eps):.10g}")
    if not 0 < eps < cert.eps_max:
        print("warning: eps is outside (0, eps_max); convergence is not certified", file=sys.stderr)
    return EXIT_OK


def _run_one(scenario_path: str, out_dir: str, seed: int | None, mode: str | None, case: str | None) -> dict[str, Any]:
    ns = argparse.Namespace(scenario=scenario_path, seed_override=seed, mode_override=mode, case=case)
    sc = _scenario(ns)
    outcome = execute(_setup(ns, sc))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    loop.write_trace_csv(outcome.trace, out / sc.outputs["trace"])
    loop.write_summary_json(outcome.summary, out / sc.outputs["summary"])
    return outcome.summary


def cmd_run(args: argparse.Namespace) -> int:
    paths = list(args.scenario)
    if len(paths) == 1:
        dirs = [args.out_dir]
    else:
        stems = [Path(p).stem for p in paths]
        if len(set(stems)) != len(stems):
            raise InputError("several scenarios share a file name; run them separately")
        dirs = [str(Path(args.out_dir) / s) for s in stems]
    jobs = [(p, d, args.seed_override, args.mode_override, args.case) for p, d in zip(paths, dirs)]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            summaries = list(pool.map(_run_one, *zip(*jobs)))
    else:
        summaries = [_run_one(*job) for job in jobs]
    ok = True
    for path, d, s in zip(paths, dirs, summaries):
        status = "diverged" if s["diverged"] else ("converged" if s["converged"] else "not converged")
        se = "" if s["se_err_avg_final"] is None else (
            f", SE error avg {100 * s['se_err_avg_final']:.2f}% max {100 * s['se_err_max_final']:.2f}%")
        print(f"{path}: {s['mode']} {status} after {s['iters']} iterations, "
              f"max violation {s['max_violation_pu']:.4f} pu{se}, bound holds {s['bound_holds']} -> {d}")
        if s["failure"]:
            print(f"  failure: {s['failure']}", file=sys.stderr)
        ok &= s["converged"] and not s["diverged"]
    return EXIT_OK if ok else EXIT_FAILED


def cmd_echo_config(args: argparse.Namespace) -> int:
    print(json.dumps(_scenario(args).to_dict(), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridloop", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_args(p: argparse.ArgumentParser, many: bool = False) -> None:
        p.add_argument("--scenario", required=True, nargs="+" if many else None,
                       help="scenario JSON file (prefix 'bundled:' for files shipped with the package)")
        p.add_argument("--case", help="case file replacing the scenario's case_path")
        p.add_argument("--seed-override", type=int, help="replace plan.seed")
        p.add_argument("--mode-override", choices=[m.value for m in loop.Mode], help="replace loop.mode")

    p = sub.add_parser("pf", help="solve the AC power flow of a case")
    p.add_argument("--case", required=True)
    p.add_argument("--injections", choices=["nominal", "zero"], default="nominal")
    p.add_argument("--scale", type=float, default=1.0, help="multiplier on the nominal injections")
    p.set_defaults(func=cmd_pf)

    p = sub.add_parser("se", help="one state estimate at the scenario's starting point")
    scenario_args(p)
    p.set_defaults(func=cmd_se)

    p = sub.add_parser("bounds", help="print the step-size certificate")
    scenario_args(p)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("run", help="run the closed loop and write trace and summary")
    scenario_args(p, many=True)
    p.add_argument("--out-dir", default=".", help="directory for the trace and summary files")
    p.add_argument("--jobs", type=int, default=1, help="run several scenarios in parallel processes")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("echo-config", help="print the scenario with all defaults filled in")
    scenario_args(p)
    p.set_defaults(func=cmd_echo_config)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_logging()
        return args.func(args)
    except (InputError, ScenarioError, CaseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except estimator.UnobservableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except ValueError as exc:
        # problem-level validation (boxes, costs, sensor ids) raised while building
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except acpf.PowerFlowDivergence as exc:
        print(f"power flow diverged: {exc}", file=sys.stderr)
        return EXIT_FAILED
