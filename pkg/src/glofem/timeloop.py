"""Orchestration of runs over the load cycle.

Four solution modes share the machinery here:

* monolithic: one adaptive solve of the reference model over the
  prediscretized grid;
* submodeling: one global pass, then per-zone local passes driven by the
  recorded interface displacement with no feedback;
* weak time coupling: global/local fixed-point loops at the stations of
  the global grid; local accuracy violations stay internal to the local
  solves;
* full time coupling: like weak, but a local accuracy violation also
  shrinks the shared increment and restarts the coupling loop, so all
  models end on the same grid.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from .coupling import CoupledProblem
from .errors import DpExceeded, StepFailure
from .fem import FieldState, Model
from .solver import SteppingPolicy, StepRecord, solve_increment

PROVENANCE = ("cycle", "prediscretization", "global_ATS", "local_ATS", "cutback")


@dataclass(frozen=True)
class LoadCycle:
    """Piecewise-linear load amplitude over time."""

    stations: tuple[tuple[float, float], ...]

    def __post_init__(self):
        ts = [t for t, _ in self.stations]
        if len(ts) < 2 or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("cycle stations must be strictly increasing in time")

    @property
    def t_start(self) -> float:
        return self.stations[0][0]

    @property
    def t_end(self) -> float:
        return self.stations[-1][0]

    def amplitude(self, t: float) -> float:
        ts = np.array([s[0] for s in self.stations])
        vs = np.array([s[1] for s in self.stations])
        return float(np.interp(t, ts, vs))

    @classmethod
    def from_pairs(cls, pairs) -> "LoadCycle":
        return cls(tuple((float(t), float(a)) for t, a in pairs))


class TimeGrid:
    """Ordered time stations with a provenance tag per station."""

    def __init__(self, stations, provenance, span_tol: float | None = None):
        self.stations = [float(t) for t in stations]
        self.provenance = list(provenance)
        if len(self.stations) != len(self.provenance):
            raise ValueError("stations/provenance length mismatch")
        if any(b <= a for a, b in zip(self.stations, self.stations[1:])):
            raise ValueError("stations must be strictly increasing")
        span = self.stations[-1] - self.stations[0] if len(self.stations) > 1 else 1.0
        self.tol = span_tol if span_tol is not None else 1.0e-9 * span

    @classmethod
    def from_cycle(cls, cycle: LoadCycle) -> "TimeGrid":
        return cls([t for t, _ in cycle.stations], ["cycle"] * len(cycle.stations))

    def copy(self) -> "TimeGrid":
        return TimeGrid(list(self.stations), list(self.provenance), self.tol)

    def __len__(self) -> int:
        return len(self.stations)

    def contains(self, t: float) -> bool:
        i = bisect.bisect_left(self.stations, t - self.tol)
        return i < len(self.stations) and abs(self.stations[i] - t) <= self.tol

    def insert(self, t: float, provenance: str) -> bool:
        """Insert a station unless one already exists within tolerance."""
        if provenance not in PROVENANCE:
            raise ValueError(f"unknown provenance '{provenance}'")
        if self.contains(t):
            return False
        bisect.insort(self.stations, t)
        self.provenance.insert(self.stations.index(t), provenance)
        return True

    def count(self, provenance: str) -> int:
        return self.provenance.count(provenance)

    def rows(self):
        return list(zip(self.stations, self.provenance))


@dataclass
class Checkpoint:
    """Converged states of all models at one synchronization time."""

    t: float
    global_state: FieldState
    local_states: list[FieldState]
    aux_states: list[FieldState]
    P: list[np.ndarray]

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            self.t,
            self.global_state.copy(),
            [s.copy() for s in self.local_states],
            [s.copy() for s in self.aux_states],
            [p.copy() for p in self.P],
        )


@dataclass(frozen=True)
class RunMode:
    """Solution mode plus the coupling options it may need."""

    mode: str = "weak"
    tol: float = 1.0e-5
    max_gl_iters: int = 25
    acceleration: str = "aitken"
    omega: float = 1.0
    warm_start: str = "scaled"
    on_max_iters: str = "error"
    threads: int = 2

    def __post_init__(self):
        if self.mode not in ("monolithic", "submodel", "weak", "full"):
            raise ValueError(f"unknown mode '{self.mode}'")
        if self.acceleration not in ("fixed_relaxation", "aitken"):
            raise ValueError(f"unknown acceleration '{self.acceleration}'")

    @classmethod
    def optimized(cls, mode: str = "weak") -> "RunMode":
        """Reduced-cost preset: loose tolerance, Aitken, capped iterations."""
        return cls(mode=mode, tol=1.0e-3, max_gl_iters=5, acceleration="aitken", on_max_iters="continue")


@dataclass
class SingleModelRun:
    """Result of a one-model pass (prediscretization, monolithic, sub-passes)."""

    model_name: str
    grid: TimeGrid
    records: list[StepRecord]
    final_state: FieldState
    snapshots: dict[float, FieldState] = field(default_factory=dict)


def _grid_provenance(cause: str, model_kind: str) -> str:
    if cause == "dp":
        return "local_ATS" if model_kind == "local" else "global_ATS"
    if cause == "cutback":
        return "cutback"
    return "global_ATS"


def _march_grid(
    model: Model,
    state: FieldState,
    grid: TimeGrid,
    policy: SteppingPolicy,
    amplitude,
    *,
    model_kind: str = "global",
    insert_prov: str | None = None,
    dirichlet=None,
    snapshot_times=(),
    on_accept=None,
):
    """March a single model across all grid intervals with internal adaptivity.

    Returns (final_state, out_grid, records): ``out_grid`` is ``grid`` plus
    any accepted internal boundaries, tagged by what sized them (or by
    ``insert_prov`` when given, e.g. during prediscretization).
    """
    out = grid.copy()
    records: list[StepRecord] = []
    snapshots: dict[float, FieldState] = {}
    snap_tol = out.tol
    cur = state
    for t0, t1 in zip(grid.stations, grid.stations[1:]):
        def accept(t, st, f_int, f_ext):
            if on_accept is not None:
                on_accept(t, st, f_int, f_ext)

        cur, recs = solve_increment(
            model, cur, t0, t1, policy, amplitude, dirichlet=dirichlet,
            on_dp="subdivide", on_accept=accept,
        )
        records.extend(recs)
        for rec in recs[:-1]:
            prov = insert_prov or _grid_provenance(rec.size_cause, model_kind)
            out.insert(rec.t_end, prov)
        for ts in snapshot_times:
            if abs(t1 - ts) <= snap_tol:
                snapshots[ts] = cur.copy()
    return SingleModelRun(model.name, out, records, cur, snapshots)


def prediscretize(model: Model, cycle: LoadCycle, policy: SteppingPolicy) -> TimeGrid:
    """Run the global model alone over the cycle and collect its time grid.

    The returned grid is the union of the cycle stations and every
    accepted internal step boundary, tagged "prediscretization".
    """
    state = FieldState.virgin(model.mesh.n_nodes, model.mesh.n_elements)
    run = _march_grid(
        model, state, TimeGrid.from_cycle(cycle), policy, cycle.amplitude,
        insert_prov="prediscretization",
    )
    return run.grid


def run_monolithic(
    model: Model,
    cycle: LoadCycle,
    grid: TimeGrid,
    policy: SteppingPolicy,
    snapshot_times=(),
) -> SingleModelRun:
    """Adaptive single-model solve of the reference mesh over the grid."""
    state = FieldState.virgin(model.mesh.n_nodes, model.mesh.n_elements)
    run = _march_grid(
        model, state, grid, policy, cycle.amplitude,
        model_kind="global", snapshot_times=snapshot_times,
    )
    return run


@dataclass
class CoupledRun:
    """Result of a weak/full coupled run (also used for submodeling)."""

    mode: str
    global_grid: TimeGrid
    local_grids: list[TimeGrid]
    final: Checkpoint
    stations: list[dict]              # per converged aim: t, iterations, restarts, rel residual
    history: list[dict]               # residual history rows across all aims
    counters: dict
    snapshots: dict[float, Checkpoint] = field(default_factory=dict)
    global_records: list[StepRecord] = field(default_factory=list)
    local_records: list[list[StepRecord]] = field(default_factory=list)


def _initial_checkpoint(cp: CoupledProblem, t0: float) -> Checkpoint:
    g = cp.global_model
    chk = Checkpoint(
        t0,
        FieldState.virgin(g.mesh.n_nodes, g.mesh.n_elements),
        [FieldState.virgin(z.local_model.mesh.n_nodes, z.local_model.mesh.n_elements) for z in cp.zones],
        [FieldState.virgin(z.aux_model.mesh.n_nodes, z.aux_model.mesh.n_elements) for z in cp.zones],
        [np.zeros(2 * z.gamma_g.size) for z in cp.zones],
    )
    return chk


def run_coupled(
    cp: CoupledProblem,
    cycle: LoadCycle,
    grid: TimeGrid,
    policy: SteppingPolicy,
    mode: str,
    snapshot_times=(),
    start: Checkpoint | None = None,
    stop_at: float | None = None,
    on_station=None,
) -> CoupledRun:
    """Weak or full time coupling over the prediscretized grid.

    ``start`` lets a run resume from a stored checkpoint; ``stop_at`` ends
    the march early at a grid station (both are used for restart tests and
    convergence studies).
    """
    if mode not in ("weak", "full"):
        raise ValueError("run_coupled handles 'weak' and 'full'")
    on_local_dp = "subdivide" if mode == "weak" else "raise"

    base = grid.copy()
    global_grid = grid.copy()
    local_grids = [grid.copy() for _ in cp.zones]
    t_end = float(stop_at) if stop_at is not None else base.stations[-1]

    chk = (start or _initial_checkpoint(cp, base.stations[0])).copy()
    span = base.stations[-1] - base.stations[0]
    snap = 1.0e-9 * span
    dt_min = 1.0e-9 * span

    i_next = bisect.bisect_right(base.stations, chk.t + snap)
    dt_c = base.stations[i_next] - chk.t if i_next < len(base.stations) else span

    stations_rows: list[dict] = []
    history_rows: list[dict] = []
    snapshots: dict[float, Checkpoint] = {}
    counters = {
        "global_ats_events": 0,
        "local_ats_events": 0,
        "gl_iterations": 0,
        "aim_restarts": 0,
        "global_solves": 0,
    }
    all_global_records: list[StepRecord] = []
    all_local_records: list[list[StepRecord]] = [[] for _ in cp.zones]
    clean_streak = 0
    pending_cause = "global_ATS"

    while chk.t < t_end - snap:
        i_next = bisect.bisect_right(base.stations, chk.t + snap)
        next_station = base.stations[i_next]
        restarts = 0
        while True:
            t_a = chk.t + dt_c
            if next_station - t_a < snap:
                t_a = next_station
            try:
                res = cp.solve_aim(chk, t_a, cycle.amplitude, on_local_dp=on_local_dp)
                break
            except DpExceeded as exc:
                dt_c *= exc.dp_max / exc.dp_observed
                if dt_c < dt_min:
                    raise StepFailure(f"coupling increment fell below {dt_min:g} s at t={chk.t:g}")
                restarts += 1
                clean_streak = 0
                if exc.model.startswith("local"):
                    pending_cause = "local_ATS"
                    counters["local_ats_events"] += 1
                else:
                    pending_cause = "global_ATS"
                    counters["global_ats_events"] += 1

        counters["gl_iterations"] += res.iterations
        counters["global_solves"] += res.iterations + restarts
        counters["aim_restarts"] += restarts

        is_base_station = base.contains(t_a)
        if not is_base_station:
            global_grid.insert(t_a, pending_cause)
            for lg in local_grids:
                lg.insert(t_a, pending_cause)
        else:
            pending_cause = "global_ATS"
        # internal boundaries of the final (accepted) iteration's sub-solves
        for rec in res.global_records[:-1]:
            global_grid.insert(rec.t_end, "cutback")
        for k, recs in enumerate(res.local_records):
            for rec in recs[:-1]:
                local_grids[k].insert(rec.t_end, _grid_provenance(rec.size_cause, "local"))
        all_global_records.extend(res.global_records)
        for k, recs in enumerate(res.local_records):
            all_local_records[k].extend(recs)

        for row in res.history:
            history_rows.append({"t": t_a, **row})
        stations_rows.append(
            {
                "t": t_a,
                "iterations": res.iterations,
                "restarts": restarts,
                "relative_residual": res.history[-1]["relative_residual"],
                "converged": res.converged,
            }
        )

        chk = Checkpoint(
            t_a,
            res.global_state.copy(),
            [s.copy() for s in res.local_states],
            [s.copy() for s in res.aux_states],
            [p.copy() for p in res.coupling.P],
        )
        if on_station is not None:
            on_station(chk)
        for ts in snapshot_times:
            if abs(t_a - ts) <= snap:
                snapshots[ts] = chk.copy()

        clean_streak += 1
        if clean_streak >= policy.fast_steps_before_growth:
            dt_c *= policy.growth_factor
            clean_streak = 0

    counters["local_ats_internal"] = sum(
        sum(r.cutbacks.count("dp_exceeded") for r in recs) for recs in all_local_records
    )
    counters["local_ats_accepted"] = sum(lg.count("local_ATS") for lg in local_grids)
    counters["global_ats_accepted"] = global_grid.count("global_ATS")
    return CoupledRun(
        mode,
        global_grid,
        local_grids,
        chk,
        stations_rows,
        history_rows,
        counters,
        snapshots,
        all_global_records,
        all_local_records,
    )


def run_weak(cp, cycle, grid, policy, **kw) -> CoupledRun:
    return run_coupled(cp, cycle, grid, policy, "weak", **kw)


def run_full(cp, cycle, grid, policy, **kw) -> CoupledRun:
    return run_coupled(cp, cycle, grid, policy, "full", **kw)


def run_submodeling(
    cp: CoupledProblem,
    cycle: LoadCycle,
    grid: TimeGrid,
    policy: SteppingPolicy,
    snapshot_times=(),
) -> CoupledRun:
    """One-way global then local analysis: no feedback, P stays zero."""
    g = cp.global_model
    trace_t: list[float] = [grid.stations[0]]
    trace_u: list[list[np.ndarray]] = [[np.zeros(2 * z.gamma_g.size) for z in cp.zones]]

    def record(t, st, f_int, f_ext):
        trace_t.append(t)
        trace_u.append([cp.interface_values(st.u, z) for z in cp.zones])

    g_state0 = FieldState.virgin(g.mesh.n_nodes, g.mesh.n_elements)
    g_run = _march_grid(
        g, g_state0, grid, policy, cycle.amplitude,
        model_kind="global", snapshot_times=snapshot_times, on_accept=record,
    )
    times = np.array(trace_t)

    local_grids = []
    local_states = []
    all_local_records: list[list[StepRecord]] = []
    local_snapshots: dict[float, list[FieldState]] = {ts: [] for ts in snapshot_times}
    for k, z in enumerate(cp.zones):
        u_mat = np.stack([u[k] for u in trace_u])  # (n_times, 2*n_gamma)

        def dirichlet(t, z=z, u_mat=u_mat):
            row = np.array([np.interp(t, times, u_mat[:, j]) for j in range(u_mat.shape[1])])
            return z.transfer.apply_displacement(row)

        st0 = FieldState.virgin(z.local_model.mesh.n_nodes, z.local_model.mesh.n_elements)
        run = _march_grid(
            z.local_model, st0, grid, policy, cycle.amplitude,
            model_kind="local", dirichlet=dirichlet, snapshot_times=snapshot_times,
        )
        local_grids.append(run.grid)
        local_states.append(run.final_state)
        all_local_records.append(run.records)
        for ts in snapshot_times:
            if ts in run.snapshots:
                local_snapshots[ts].append(run.snapshots[ts])

    final = Checkpoint(
        grid.stations[-1],
        g_run.final_state,
        local_states,
        [FieldState.virgin(z.aux_model.mesh.n_nodes, z.aux_model.mesh.n_elements) for z in cp.zones],
        [np.zeros(2 * z.gamma_g.size) for z in cp.zones],
    )
    counters = {
        "global_ats_events": sum(r.cutbacks.count("dp_exceeded") for r in g_run.records),
        "local_ats_internal": sum(
            sum(r.cutbacks.count("dp_exceeded") for r in recs) for recs in all_local_records
        ),
        "local_ats_accepted": sum(lg.count("local_ATS") for lg in local_grids),
        "global_ats_accepted": g_run.grid.count("global_ATS"),
        "gl_iterations": 0,
        "aim_restarts": 0,
        "global_solves": 1,
    }
    snapshots = {}
    for ts in snapshot_times:
        if ts in g_run.snapshots:
            snapshots[ts] = Checkpoint(
                ts, g_run.snapshots[ts], local_snapshots[ts],
                [FieldState.virgin(z.aux_model.mesh.n_nodes, z.aux_model.mesh.n_elements) for z in cp.zones],
                [np.zeros(2 * z.gamma_g.size) for z in cp.zones],
            )
    return CoupledRun(
        "submodel", g_run.grid, local_grids, final, [], [], counters, snapshots,
        g_run.records, all_local_records,
    )
