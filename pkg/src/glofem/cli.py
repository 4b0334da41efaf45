"""Command-line interface.

Commands: material-test, prediscretize, run, compare, selfcheck, init-demo.
Exit codes: 0 success, 2 scenario/usage error, 3 solver failure,
4 coupling non-convergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import (
    GlofemError,
    MaxIterations,
    NoConvergence,
    OverflowGuard,
    ScenarioError,
    StepFailure,
)
from .scenario import (
    ScenarioRuntime,
    compare_reports,
    load_report,
    load_scenario,
    run_scenario,
    selfcheck_output_dir,
    write_csv,
    write_demo,
)
from .solver import SteppingPolicy, tension_test
from .timeloop import RunMode

OVERKILL_DP = 1.0e-5


def _policy_with(policy: SteppingPolicy, dp_max: float) -> SteppingPolicy:
    kw = {k: getattr(policy, k) for k in policy.__dataclass_fields__}
    kw["dp_max"] = dp_max
    return SteppingPolicy(**kw)


def _run_options(sc, args) -> RunMode:
    kw = dict(sc.run.__dict__)
    if getattr(args, "mode", None):
        kw["mode"] = args.mode
    if getattr(args, "tol", None) is not None:
        kw["tol"] = args.tol
    if getattr(args, "aitken", None):
        kw["acceleration"] = "aitken" if args.aitken == "on" else "fixed_relaxation"
    if getattr(args, "max_gl_iters", None) is not None:
        kw["max_gl_iters"] = args.max_gl_iters
    if getattr(args, "omega", None) is not None:
        kw["omega"] = args.omega
    return RunMode(**kw)


def cmd_material_test(args) -> int:
    sc = load_scenario(args.scenario)
    policy = _policy_with(sc.policy, args.dpmax)
    curve, steps = tension_test(sc.material, args.strain_rate, args.strain_final, policy)
    ref_curve, ref_steps = tension_test(
        sc.material, args.strain_rate, args.strain_final, _policy_with(sc.policy, OVERKILL_DP)
    )
    err = abs(curve[-1, 2] - ref_curve[-1, 2]) / abs(ref_curve[-1, 2])
    print("strain_rate dp_max error_pf_% steps overkill_steps end_stress end_p_f")
    print(
        f"{args.strain_rate:g} {args.dpmax:g} {100 * err:.4g} {steps} {ref_steps} "
        f"{curve[-1, 1]:.6g} {curve[-1, 2]:.8g}"
    )
    return 0


def cmd_prediscretize(args) -> int:
    sc = load_scenario(args.scenario)
    rt = ScenarioRuntime(sc)
    policy = _policy_with(sc.policy, args.dpmax) if args.dpmax else sc.policy
    grid = rt.prediscretized_grid(policy)
    out = Path(args.out) if args.out else sc.outputs
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"grid_prediscretized_dp{policy.dp_max:g}.csv"
    write_csv(path, "time_grid", grid.rows())
    print(f"{len(grid)} stations -> {path}")
    return 0


def cmd_run(args) -> int:
    sc = load_scenario(args.scenario)
    run = _run_options(sc, args)
    report = run_scenario(
        sc,
        mode=run.mode,
        dp_max=args.dpmax,
        out_dir=args.out,
        run_opts=run,
    )
    print(f"report: {report['_path']}")
    m = report["end_metrics"]
    print(
        f"mode={report['mode']} dp_max={report['dp_max']:g} "
        f"max_vM={m['max_von_mises']:.4g} MPa  max_p_f={m['max_p_f']:.6g} "
        f"at {m['max_p_f_at']}  gl_iters={report['gl']['total_iterations']}"
    )
    return 0


def cmd_compare(args) -> int:
    rep_a = load_report(args.reference)
    rep_b = load_report(args.run)
    table = compare_reports(rep_a, rep_b)
    print(f"probe at {table['probe_xy']} (nearest distance {table['probe_distance']:.3g} mm)")
    print(f"{'':12s} {'reference':>14s} {'run':>14s} {'error %':>10s}")
    for key in ("von_mises", "p_f", "p_s"):
        print(
            f"{key:12s} {table['reference'][key]:14.6g} {table['run'][key]:14.6g} "
            f"{table['errors_percent'][key]:10.3f}"
        )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        p = out / "compare.json"
        p.write_text(json.dumps(table, indent=1, sort_keys=True))
        print(f"written: {p}")
    return 0


def cmd_selfcheck(args) -> int:
    problems = selfcheck_output_dir(args.out)
    if problems:
        for p in problems:
            print(f"FAIL {p}")
        return 2
    print("all artifacts parse back against their schemas")
    return 0


def cmd_init_demo(args) -> int:
    path = write_demo(args.out, seed=args.seed)
    print(f"demo scenario written: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="glofem", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("material-test", help="single-element tension test row")
    p.add_argument("strain_rate", type=float)
    p.add_argument("dpmax", type=float)
    p.add_argument("strain_final", type=float)
    p.add_argument("--scenario", required=True)
    p.set_defaults(fn=cmd_material_test)

    p = sub.add_parser("prediscretize", help="time grid of the global model alone")
    p.add_argument("--scenario", required=True)
    p.add_argument("--dpmax", type=float)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_prediscretize)

    p = sub.add_parser("run", help="execute a scenario in one mode")
    p.add_argument("--scenario", required=True)
    p.add_argument("--mode", choices=["monolithic", "submodel", "weak", "full"])
    p.add_argument("--dpmax", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--aitken", choices=["on", "off"])
    p.add_argument("--max-gl-iters", type=int, dest="max_gl_iters")
    p.add_argument("--omega", type=float)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("compare", help="error table of a run against a reference run")
    p.add_argument("reference")
    p.add_argument("run")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("selfcheck", help="validate CSV artifacts in an output directory")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_selfcheck)

    p = sub.add_parser("init-demo", help="write the demo scenario and meshes")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_init_demo)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    except (StepFailure, NoConvergence, OverflowGuard) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    except MaxIterations as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return 4
    except GlofemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
