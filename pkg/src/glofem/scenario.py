"""Scenario files, the shipped demo problem, run orchestration and reports.

A scenario is a JSON file pointing at mesh files and carrying the
material block, partition description, load cycle, stepping policy, run
options and load definitions.  Every run writes a JSON report plus CSV
artifacts (step logs, time grids, residual histories, field snapshots
and an end-of-cycle Gauss-point table used for run-to-run comparisons).

All numeric CSV output uses 17-significant-digit decimal formatting so
values round-trip exactly; nothing downstream ever sees truncated
precision.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coupling import CoupledProblem, DomainPartition, merged_gp_table
from .errors import IncompatibleRuns, ScenarioError
from .fem import BodyForce, FieldState, LoadCase, Model
from .material import MaterialParams
from .mesh import Mesh, merge_meshes, punch_holes, rect_grid, submesh
from .solver import SteppingPolicy
from .tensors import j2
from .timeloop import (
    LoadCycle,
    RunMode,
    TimeGrid,
    prediscretize,
    run_coupled,
    run_monolithic,
    run_submodeling,
)

REPORT_SCHEMA = "glofem-report-v1"

SCHEMAS = {
    "step_log": ("t_start", "t_end", "newton_iters", "cutback_cause", "dp_observed"),
    "time_grid": ("time", "provenance"),
    "residual_history": ("time", "iter", "residual_norm", "relative_residual", "omega", "local_ats"),
    "nodes": ("node", "x", "y", "ux", "uy"),
    "gps": ("element", "gp", "sxx", "syy", "sxy", "szz", "p_f", "p_s"),
    "end_gp": ("x", "y", "source", "sxx", "syy", "sxy", "szz", "von_mises", "p_f", "p_s"),
}


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path, schema: str, rows) -> None:
    cols = SCHEMAS[schema]
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path, schema: str) -> list[list[str]]:
    cols = SCHEMAS[schema]
    text = Path(path).read_text().strip().splitlines()
    if not text or tuple(text[0].split(",")) != cols:
        raise ScenarioError(f"{path}: header does not match schema '{schema}'")
    return [line.split(",") for line in text[1:]]


# ----------------------------------------------------------------------
# scenario definition
# ----------------------------------------------------------------------
@dataclass
class Scenario:
    path: Path
    material: MaterialParams
    meshes: dict                      # "global"/"reference" -> path, "locals" -> [paths]
    partition: dict
    cycle: LoadCycle
    policy: SteppingPolicy
    run: RunMode
    loads: LoadCase
    outputs: Path
    plane: str = "strain"


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    try:
        material = MaterialParams.from_mapping(data["material"])
        cycle = LoadCycle.from_pairs(data["cycle"])
        policy = SteppingPolicy(**data.get("policy", {}))
        run = RunMode(**data.get("run", {}))
        loads_spec = data.get("loads", {})
        bf = loads_spec.get("body_force")
        loads = LoadCase(
            pressure={k: float(v) for k, v in loads_spec.get("pressure", {}).items()},
            body_force=BodyForce(float(bf["coeff"]), float(bf.get("axis_x", 0.0))) if bf else None,
            dirichlet={
                k: {c: float(v) for c, v in comps.items()}
                for k, comps in loads_spec.get("dirichlet", {}).items()
            },
        )
        meshes = data["meshes"]
        partition = data.get("partition", {})
        outputs = data.get("outputs", "out")
        plane = data.get("plane", "strain")
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"scenario {path}: {exc}") from exc
    if plane != "strain":
        raise ScenarioError("only plane='strain' is implemented")

    base = path.parent
    resolved = {}
    for key in ("global", "reference"):
        if key in meshes:
            resolved[key] = base / meshes[key]
    resolved["locals"] = [base / p for p in meshes.get("locals", [])]
    for p in [resolved.get("global"), resolved.get("reference"), *resolved["locals"]]:
        if p is not None and not Path(p).exists():
            raise ScenarioError(f"mesh file missing: {p}")
    return Scenario(
        path=path,
        material=material,
        meshes=resolved,
        partition=partition,
        cycle=cycle,
        policy=policy,
        run=run,
        loads=loads,
        outputs=base / outputs,
        plane=plane,
    )


# ----------------------------------------------------------------------
# shipped demo problem: clamped plate with a perforated root zone
# ----------------------------------------------------------------------
DEMO_HOLES = ((10.0, 4.0, 2.9), (10.0, 10.0, 2.9), (10.0, 16.0, 2.9))


def demo_meshes(nx: int = 30, ny: int = 10, x_interface: float = 20.0,
                fine_factor: int = 1, seed: int | None = None):
    """Global / local / reference meshes of the demo plate.

    ``fine_factor > 1`` re-meshes the zone at a finer pitch, producing a
    non-matching interface; ``seed`` additionally jitters the local
    interface node spacing along the interface line.
    """
    lx, ly = 60.0, 20.0
    gm = rect_grid(0.0, 0.0, lx, ly, nx, ny)
    gm.node_sets["interface_zone0"] = np.nonzero(np.abs(gm.nodes[:, 0] - x_interface) < 1e-9)[0]

    nxl = int(round(nx * x_interface / lx)) * fine_factor
    nyl = ny * fine_factor
    lm = rect_grid(0.0, 0.0, x_interface, ly, nxl, nyl)
    lm = punch_holes(lm, list(DEMO_HOLES))
    lm.node_sets["interface"] = lm.node_sets.pop("right")
    lm.side_sets.pop("right")
    if seed is not None:
        rng = np.random.default_rng(seed)
        ids = lm.node_sets["interface"]
        ys = lm.nodes[ids, 1]
        inner = (ys > 1e-9) & (ys < ly - 1e-9)
        h = ly / nyl
        lm.nodes[ids[inner], 1] += rng.uniform(-0.25 * h, 0.25 * h, size=int(inner.sum()))
        lm.validate()

    centers = gm.nodes[gm.elements].mean(axis=1)
    aux_ids = np.nonzero(centers[:, 0] < x_interface)[0]
    comp, _ = submesh(gm, np.nonzero(centers[:, 0] > x_interface)[0])
    reference = None
    if fine_factor == 1 and seed is None:
        reference = merge_meshes(comp, lm)
    return gm, lm, reference, aux_ids


def write_demo(out_dir, nx: int = 30, ny: int = 10, seed: int | None = None) -> Path:
    """Write the demo scenario (and a re-meshed non-matching variant)."""
    out = Path(out_dir)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    gm, lm, ref, aux_ids = demo_meshes(nx, ny)
    gm.save(out / "meshes" / "global.json")
    lm.save(out / "meshes" / "local_zone0.json")
    ref.save(out / "meshes" / "reference.json")
    _, lm_fine, _, _ = demo_meshes(nx, ny, fine_factor=2, seed=seed)
    lm_fine.save(out / "meshes" / "local_zone0_fine.json")

    base = {
        "material": {"E": 154000.0, "nu": 0.28, "C": 615000.0, "D": 1870.0, "R": 80.0,
                     "n_f": 14.0, "K_f": 630.0, "n_s": 17.2, "K_s": 1300.0},
        "cycle": [[0.0, 0.0], [60.0, 1.0], [540.0, 1.0], [600.0, 0.0]],
        "policy": {"dp_max": 1e-4},
        "run": {"mode": "weak", "tol": 1e-5, "max_gl_iters": 25, "acceleration": "aitken"},
        "loads": {
            "pressure": {"right": 10.0},
            "body_force": {"coeff": 0.16, "axis_x": -20.0},
            "dirichlet": {"left": {"ux": 0.0}, "corner_bl": {"uy": 0.0}},
        },
        "partition": {"zones": [{"local": 0, "interface_global_set": "interface_zone0",
                                  "interface_local_set": "interface",
                                  "aux_elements": aux_ids.tolist()}]},
        "meshes": {"global": "meshes/global.json", "reference": "meshes/reference.json",
                   "locals": ["meshes/local_zone0.json"]},
        "outputs": "out",
    }
    (out / "scenario.json").write_text(json.dumps(base, indent=1))
    remeshed = json.loads(json.dumps(base))
    remeshed["meshes"]["locals"] = ["meshes/local_zone0_fine.json"]
    remeshed["outputs"] = "out_remeshed"
    (out / "scenario_remeshed.json").write_text(json.dumps(remeshed, indent=1))
    return out / "scenario.json"


# ----------------------------------------------------------------------
# runtime
# ----------------------------------------------------------------------
class ScenarioRuntime:
    """Built models for one scenario, with prediscretization caching."""

    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.global_mesh = Mesh.load(scenario.meshes["global"]) if "global" in scenario.meshes else None
        self.reference_mesh = (
            Mesh.load(scenario.meshes["reference"]) if "reference" in scenario.meshes else None
        )
        self.local_meshes = [Mesh.load(p) for p in scenario.meshes["locals"]]
        self.partition = None
        if self.global_mesh is not None and self.local_meshes:
            zones = self.sc.partition.get("zones", [])
            if len(zones) != len(self.local_meshes):
                raise ScenarioError("partition zones must match the number of local meshes")
            self.partition = DomainPartition(
                self.global_mesh,
                [self.local_meshes[z["local"]] for z in zones],
                [np.asarray(z["aux_elements"], dtype=int) for z in zones],
                [z["interface_global_set"] for z in zones],
                [z["interface_local_set"] for z in zones],
            )
        self._grids: dict[float, TimeGrid] = {}

    def reference_model(self) -> Model:
        if self.reference_mesh is None:
            raise ScenarioError("scenario has no reference mesh (needed for monolithic runs)")
        return Model(self.reference_mesh, self.sc.material, self.sc.loads.filter_for(self.reference_mesh), name="reference")

    def coupled_problem(self, run: RunMode, policy: SteppingPolicy) -> CoupledProblem:
        if self.partition is None:
            raise ScenarioError("scenario has no global/local partition (needed for coupled runs)")
        return CoupledProblem(
            self.partition, self.sc.material, self.sc.loads, policy,
            tol=run.tol, max_gl_iters=run.max_gl_iters, acceleration=run.acceleration,
            omega=run.omega, warm_start=run.warm_start, on_max_iters=run.on_max_iters,
            threads=run.threads,
        )

    def prediscretized_grid(self, policy: SteppingPolicy) -> TimeGrid:
        """Grid of the global model run alone; cached per dp_max."""
        key = policy.dp_max
        if key not in self._grids:
            if self.partition is not None:
                model = Model(
                    self.global_mesh, self.sc.material,
                    self.sc.loads.filter_for(self.global_mesh), name="global",
                )
            else:
                model = self.reference_model()
            self._grids[key] = prediscretize(model, self.sc.cycle, policy)
        return self._grids[key]


def _grid_rows(grid: TimeGrid):
    return grid.rows()


def _records_rows(records):
    return [
        (r.t_start, r.t_end, r.newton_iters, "|".join(r.cutbacks) or "none", r.dp_observed)
        for r in records
    ]


def _node_rows(mesh: Mesh, state: FieldState):
    return [
        (i, mesh.nodes[i, 0], mesh.nodes[i, 1], state.u[2 * i], state.u[2 * i + 1])
        for i in range(mesh.n_nodes)
    ]


def _gp_rows(state: FieldState):
    sig = state.sigma
    rows = []
    for i in range(sig.shape[0]):
        rows.append(
            (i // 4, i % 4, sig[i, 0], sig[i, 1], sig[i, 3], sig[i, 2], state.gp.p_f[i], state.gp.p_s[i])
        )
    return rows


def _end_table_rows(table):
    rows = []
    for i in range(table["xy"].shape[0]):
        s = table["sigma"][i]
        rows.append(
            (table["xy"][i, 0], table["xy"][i, 1], table["source"][i],
             s[0], s[1], s[3], s[2], table["von_mises"][i], table["p_f"][i], table["p_s"][i])
        )
    return rows


def _end_metrics(table):
    i_vm = int(np.argmax(table["von_mises"]))
    i_pf = int(np.argmax(table["p_f"]))
    return {
        "max_von_mises": float(table["von_mises"][i_vm]),
        "max_von_mises_at": [float(v) for v in table["xy"][i_vm]],
        "max_p_f": float(table["p_f"][i_pf]),
        "max_p_f_at": [float(v) for v in table["xy"][i_pf]],
        "max_p_s": float(table["p_s"].max()),
    }


def _mono_table(mesh: Mesh, state: FieldState):
    sig = state.sigma
    return {
        "xy": mesh.gauss_points().reshape(-1, 2),
        "sigma": sig,
        "von_mises": j2(sig),
        "p_f": state.gp.p_f,
        "p_s": state.gp.p_s,
        "source": np.full(sig.shape[0], "reference", dtype=object),
    }


def run_scenario(
    scenario: Scenario,
    mode: str | None = None,
    dp_max: float | None = None,
    out_dir=None,
    runtime: ScenarioRuntime | None = None,
    run_opts: RunMode | None = None,
) -> dict:
    """Execute one run of the scenario and write its artifacts.

    Returns the report dict (also written to ``report_<tag>.json``).
    """
    rt = runtime or ScenarioRuntime(scenario)
    run = run_opts or scenario.run
    if mode is not None:
        run = RunMode(**{**run.__dict__, "mode": mode})
    policy = scenario.policy
    if dp_max is not None:
        kw = {k: getattr(policy, k) for k in policy.__dataclass_fields__}
        kw["dp_max"] = dp_max
        policy = SteppingPolicy(**kw)

    out = Path(out_dir) if out_dir is not None else scenario.outputs
    out.mkdir(parents=True, exist_ok=True)
    tag = f"{run.mode}_dp{policy.dp_max:g}"
    stations = [t for t, _ in scenario.cycle.stations]

    t0 = time.perf_counter()
    grid = rt.prediscretized_grid(policy)
    artifacts: dict[str, str] = {}

    def save_csv(name, schema, rows):
        p = out / name
        write_csv(p, schema, rows)
        artifacts[name.rsplit(".", 1)[0]] = str(p)

    report = {
        "schema": REPORT_SCHEMA,
        "mode": run.mode,
        "dp_max": policy.dp_max,
        "scenario": str(scenario.path),
        "cycle": [[t, a] for t, a in scenario.cycle.stations],
        "run_options": dict(run.__dict__),
        "policy": {k: getattr(policy, k) for k in policy.__dataclass_fields__},
        "prediscretization_stations": len(grid),
    }
    save_csv(f"grid_prediscretized_dp{policy.dp_max:g}.csv", "time_grid", _grid_rows(grid))

    if run.mode == "monolithic":
        model = rt.reference_model()
        res = run_monolithic(model, scenario.cycle, grid, policy, snapshot_times=stations)
        table = _mono_table(model.mesh, res.final_state)
        report["grids"] = {"reference": _grid_rows(res.grid)}
        report["final_stations"] = len(res.grid)
        report["ats"] = {
            "global_accepted": res.grid.count("global_ATS"),
            "local_accepted": 0,
            "local_internal": 0,
            "cutback_stations": res.grid.count("cutback"),
        }
        report["gl"] = {"total_iterations": 0, "per_station": []}
        save_csv(f"step_log_reference_{tag}.csv", "step_log", _records_rows(res.records))
        save_csv(f"grid_reference_{tag}.csv", "time_grid", _grid_rows(res.grid))
        for ts, st in res.snapshots.items():
            save_csv(f"fields_reference_t{ts:g}_{tag}_nodes.csv", "nodes", _node_rows(model.mesh, st))
            save_csv(f"fields_reference_t{ts:g}_{tag}_gps.csv", "gps", _gp_rows(st))
    else:
        cp = rt.coupled_problem(run, policy)
        if run.mode == "submodel":
            res = run_submodeling(cp, scenario.cycle, grid, policy, snapshot_times=stations)
        else:
            res = run_coupled(cp, scenario.cycle, grid, policy, run.mode, snapshot_times=stations)
        table = merged_gp_table(rt.partition, res.final.global_state, res.final.local_states)
        report["grids"] = {"global": _grid_rows(res.global_grid)}
        for k, lg in enumerate(res.local_grids):
            report["grids"][f"local_{k}"] = _grid_rows(lg)
        report["ats"] = {
            "global_accepted": res.counters["global_ats_accepted"],
            "local_accepted": res.counters["local_ats_accepted"],
            "local_internal": res.counters["local_ats_internal"],
            "global_events": res.counters.get("global_ats_events", 0),
            "local_events": res.counters.get("local_ats_events", 0),
            "cutback_stations": res.global_grid.count("cutback"),
        }
        report["gl"] = {
            "total_iterations": res.counters["gl_iterations"],
            "aim_restarts": res.counters.get("aim_restarts", 0),
            "per_station": [
                [s["t"], s["iterations"], s["restarts"], s["relative_residual"]] for s in res.stations
            ],
        }
        save_csv(f"step_log_global_{tag}.csv", "step_log", _records_rows(res.global_records))
        for k, recs in enumerate(res.local_records):
            save_csv(f"step_log_local_{k}_{tag}.csv", "step_log", _records_rows(recs))
        save_csv(f"grid_global_{tag}.csv", "time_grid", _grid_rows(res.global_grid))
        for k, lg in enumerate(res.local_grids):
            save_csv(f"grid_local_{k}_{tag}.csv", "time_grid", _grid_rows(lg))
        save_csv(
            f"residual_history_{tag}.csv", "residual_history",
            [(h["t"], h["iter"], h["residual_norm"], h["relative_residual"], h["omega"], h["local_ats"]) for h in res.history],
        )
        for ts, chk in res.snapshots.items():
            save_csv(f"fields_global_t{ts:g}_{tag}_nodes.csv", "nodes", _node_rows(rt.global_mesh, chk.global_state))
            save_csv(f"fields_global_t{ts:g}_{tag}_gps.csv", "gps", _gp_rows(chk.global_state))
            for k, lst in enumerate(chk.local_states):
                save_csv(f"fields_local_{k}_t{ts:g}_{tag}_nodes.csv", "nodes", _node_rows(rt.local_meshes[k], lst))
                save_csv(f"fields_local_{k}_t{ts:g}_{tag}_gps.csv", "gps", _gp_rows(lst))

    save_csv(f"end_gp_{tag}.csv", "end_gp", _end_table_rows(table))
    report["end_metrics"] = _end_metrics(table)
    report["artifacts"] = artifacts
    report["wall_time_s"] = time.perf_counter() - t0
    report_path = out / f"report_{tag}.json"
    report_path.write_text(json.dumps(report, indent=1, sort_keys=True))
    report["_path"] = str(report_path)
    return report


# ----------------------------------------------------------------------
# comparison
# ----------------------------------------------------------------------
def _load_end_table(report: dict) -> np.ndarray:
    tag = f"{report['mode']}_dp{report['dp_max']:g}"
    path = report["artifacts"][f"end_gp_{tag}"]
    rows = read_csv(path, "end_gp")
    xy = np.array([[float(r[0]), float(r[1])] for r in rows])
    vm = np.array([float(r[7]) for r in rows])
    p_f = np.array([float(r[8]) for r in rows])
    p_s = np.array([float(r[9]) for r in rows])
    return {"xy": xy, "von_mises": vm, "p_f": p_f, "p_s": p_s}


def compare_reports(report_a: dict, report_b: dict) -> dict:
    """Relative end-of-cycle errors of run B against reference run A.

    The probe point is the Gauss point with maximal p_f in run A; run B is
    evaluated at its geometrically nearest Gauss point.
    """
    if report_a["cycle"] != report_b["cycle"]:
        raise IncompatibleRuns("runs use different load cycles")
    a = _load_end_table(report_a)
    b = _load_end_table(report_b)
    i = int(np.argmax(a["p_f"]))
    d = np.linalg.norm(b["xy"] - a["xy"][i], axis=1)
    jn = int(np.argmin(d))
    out = {
        "probe_xy": [float(v) for v in a["xy"][i]],
        "probe_distance": float(d[jn]),
        "reference": {"von_mises": float(a["von_mises"][i]), "p_f": float(a["p_f"][i]), "p_s": float(a["p_s"][i])},
        "run": {"von_mises": float(b["von_mises"][jn]), "p_f": float(b["p_f"][jn]), "p_s": float(b["p_s"][jn])},
    }
    out["errors_percent"] = {
        k: 100.0 * (out["run"][k] - out["reference"][k]) / out["reference"][k]
        for k in ("von_mises", "p_f", "p_s")
    }
    return out


def load_report(path) -> dict:
    try:
        rep = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read report {path}: {exc}") from exc
    if rep.get("schema") != REPORT_SCHEMA:
        raise ScenarioError(f"{path} is not a {REPORT_SCHEMA} report")
    return rep


def selfcheck_output_dir(out_dir) -> list[str]:
    """Re-parse every CSV artifact referenced by the reports in a directory."""
    problems = []
    out = Path(out_dir)
    reports = sorted(out.glob("report_*.json"))
    if not reports:
        problems.append(f"no reports found in {out}")
    for rp in reports:
        try:
            rep = load_report(rp)
        except ScenarioError as exc:
            problems.append(str(exc))
            continue
        for path in rep.get("artifacts", {}).values():
            stem = Path(path).name
            if stem.startswith("step_log"):
                schema = "step_log"
            elif stem.startswith("grid_"):
                schema = "time_grid"
            elif stem.startswith("residual_history"):
                schema = "residual_history"
            elif stem.startswith("end_gp"):
                schema = "end_gp"
            elif stem.endswith("_nodes.csv"):
                schema = "nodes"
            elif stem.endswith("_gps.csv"):
                schema = "gps"
            else:
                problems.append(f"{path}: unknown artifact kind")
                continue
            try:
                read_csv(path, schema)
            except (OSError, ScenarioError) as exc:
                problems.append(str(exc))
    return problems
