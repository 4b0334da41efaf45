"""Non-invasive global/local fixed-point coupling at one synchronization time.

One iteration of the engine is: global solve with a corrective interface
load, local and auxiliary Dirichlet solves (run concurrently), interface
equilibrium residual, and a relaxed (optionally Aitken-accelerated)
update of the corrective load.

Sign conventions, fixed here once and verified against the matched-mesh
monolithic oracle in the tests:

* a model's nodal reaction is lam = (f_int - f_ext) restricted to the
  interface dofs;
* the global model carries the corrective load P as an extra external
  load on the interface, so its complement-side reaction is P - lam_aux;
* the residual is r = lam_aux - P - T^T lam_local, which vanishes exactly
  when complement and local model are in balance, and the update
  P <- P + omega * r reproduces the stationary iteration
  P = lam_aux - T^T lam_local at omega = 1.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DpExceeded, MaxIterations, ProjectionFailure
from .fem import FieldState, LoadCase, Model
from .material import MaterialParams
from .mesh import Mesh, order_along_polyline, submesh
from .solver import SteppingPolicy, solve_increment
from .tensors import j2


@dataclass
class TransferMatrix:
    """Sparse interpolation operator from global to local interface nodes."""

    matrix: sp.csr_matrix     # (n_local, n_global), rows are interpolation weights

    @property
    def shape(self):
        return self.matrix.shape

    def apply_displacement(self, u_gamma: np.ndarray) -> np.ndarray:
        """Map interleaved (ux, uy) global interface values to local nodes."""
        vals = u_gamma.reshape(-1, 2)
        return (self.matrix @ vals).ravel()

    def distribute_force(self, lam_local: np.ndarray) -> np.ndarray:
        """T^T: map interleaved local interface forces to global nodes."""
        vals = lam_local.reshape(-1, 2)
        return (self.matrix.T @ vals).ravel()

    @classmethod
    def identity(cls, n: int) -> "TransferMatrix":
        return cls(sp.identity(n, format="csr"))


def build_transfer(
    global_coords: np.ndarray,
    local_coords: np.ndarray,
    tol: float | None = None,
) -> TransferMatrix:
    """Interpolation weights of local interface nodes in the global polyline.

    ``global_coords`` are the ordered global interface node positions; each
    local node is projected onto the containing edge by arc length and
    receives the two linear weights of that edge.  Rows sum to one exactly
    and coincident nodes produce unit rows.
    """
    pts = np.asarray(global_coords, dtype=float)
    if len(pts) < 2:
        raise ProjectionFailure("global interface needs at least two nodes")
    seg = np.diff(pts, axis=0)
    seg_len2 = np.einsum("ij,ij->i", seg, seg)
    arc = np.concatenate([[0.0], np.cumsum(np.sqrt(seg_len2))])
    if tol is None:
        tol = 1.0e-7 * arc[-1]

    rows, cols, vals = [], [], []
    for i, x in enumerate(np.asarray(local_coords, dtype=float)):
        d = x[None, :] - pts[:-1]
        t = np.clip(np.einsum("ij,ij->i", d, seg) / seg_len2, 0.0, 1.0)
        proj = pts[:-1] + t[:, None] * seg
        dist = np.linalg.norm(proj - x[None, :], axis=1)
        k = int(np.argmin(dist))
        if dist[k] > tol:
            raise ProjectionFailure(
                f"local interface node {i} at {x} lies {dist[k]:.3e} from the global interface"
            )
        tk = float(t[k])
        if tk < 1.0e-12:
            rows.append(i), cols.append(k), vals.append(1.0)
        elif tk > 1.0 - 1.0e-12:
            rows.append(i), cols.append(k + 1), vals.append(1.0)
        else:
            w0 = 1.0 - tk
            rows.extend((i, i))
            cols.extend((k, k + 1))
            vals.extend((w0, 1.0 - w0))  # row sum exactly one
    m = sp.csr_matrix((vals, (rows, cols)), shape=(len(local_coords), len(pts)))
    return TransferMatrix(m)


@dataclass
class CouplingState:
    """Interface load and residual history of one fixed-point loop."""

    P: list[np.ndarray]
    omega: float
    iter: int = 0
    r_prev: np.ndarray | None = None
    r_curr: np.ndarray | None = None
    residual_history: list[float] = field(default_factory=list)
    degenerate_fallbacks: int = 0

    def concat_P(self) -> np.ndarray:
        return np.concatenate(self.P)


def accelerate(state: CouplingState, mode: str) -> CouplingState:
    """Update the corrective load in place with fixed relaxation or Aitken.

    The Aitken secant update needs two residuals; a degenerate secant
    (``r_i ~ r_{i-1}``) falls back to omega = 1.
    """
    r = state.r_curr
    if mode == "aitken" and state.r_prev is not None:
        dr = r - state.r_prev
        denom = float(dr @ dr)
        if denom < (1.0e-14 * float(np.linalg.norm(r))) ** 2 or denom == 0.0:
            state.omega = 1.0
            state.degenerate_fallbacks += 1
        else:
            state.omega = -state.omega * float(state.r_prev @ dr) / denom
    offset = 0
    for p in state.P:
        p += state.omega * r[offset : offset + p.size]
        offset += p.size
    return state


@dataclass
class Zone:
    """One zone of interest: local model, auxiliary model and transfer data."""

    name: str
    local_model: Model
    aux_model: Model
    transfer: TransferMatrix
    gamma_g: np.ndarray          # ordered global node ids on the interface
    gamma_l: np.ndarray          # ordered local node ids on the interface
    gamma_aux: np.ndarray        # gamma_g mapped into auxiliary numbering
    aux_elements: np.ndarray     # global element ids forming the zone
    aux_node_map: np.ndarray     # aux node id -> global node id

    @property
    def gamma_g_dofs(self) -> np.ndarray:
        d = np.empty(2 * self.gamma_g.size, dtype=int)
        d[0::2] = 2 * self.gamma_g
        d[1::2] = 2 * self.gamma_g + 1
        return d


@dataclass
class DomainPartition:
    """Global mesh split into complement and per-zone auxiliary patches."""

    global_mesh: Mesh
    local_meshes: list[Mesh]
    aux_element_sets: list[np.ndarray]
    interface_global_sets: list[str]
    interface_local_sets: list[str]

    def complement_elements(self) -> np.ndarray:
        mask = np.ones(self.global_mesh.n_elements, dtype=bool)
        for ids in self.aux_element_sets:
            mask[ids] = False
        return np.nonzero(mask)[0]

    def validate(self) -> None:
        seen = np.zeros(self.global_mesh.n_elements, dtype=int)
        for ids in self.aux_element_sets:
            seen[ids] += 1
        if seen.max() > 1:
            raise ValueError("auxiliary element sets overlap")
        comp = self.complement_elements()
        comp_nodes = set(self.global_mesh.elements[comp].ravel().tolist())
        for k, (ids, gset) in enumerate(zip(self.aux_element_sets, self.interface_global_sets)):
            aux_nodes = set(self.global_mesh.elements[ids].ravel().tolist())
            shared = aux_nodes & comp_nodes
            declared = set(self.global_mesh.node_sets[gset].tolist())
            if shared != declared:
                raise ValueError(
                    f"interface set '{gset}' does not match the complement/zone boundary"
                )


class CoupledProblem:
    """Models and options for the global/local engine over one partition."""

    def __init__(
        self,
        partition: DomainPartition,
        params: MaterialParams,
        loads: LoadCase,
        policy: SteppingPolicy,
        *,
        tol: float = 1.0e-5,
        max_gl_iters: int = 25,
        acceleration: str = "aitken",
        omega: float = 1.0,
        warm_start: str = "scaled",
        on_max_iters: str = "error",
        threads: int = 2,
    ):
        partition.validate()
        self.partition = partition
        self.params = params
        self.policy = policy
        self.tol = tol
        self.max_gl_iters = max_gl_iters
        self.acceleration = acceleration
        self.omega0 = omega
        self.warm_start = warm_start
        self.on_max_iters = on_max_iters

        gm = partition.global_mesh
        self.global_model = Model(gm, params, loads.filter_for(gm), name="global")

        self.zones: list[Zone] = []
        for k, (lmesh, aux_ids, gset, lset) in enumerate(
            zip(
                partition.local_meshes,
                partition.aux_element_sets,
                partition.interface_global_sets,
                partition.interface_local_sets,
            )
        ):
            gamma_g = order_along_polyline(gm.nodes, gm.node_sets[gset])
            gamma_l = order_along_polyline(lmesh.nodes, lmesh.node_sets[lset])
            aux_mesh, node_map = submesh(gm, aux_ids)
            inv = {int(g): i for i, g in enumerate(node_map)}
            gamma_aux = np.array([inv[int(g)] for g in gamma_g], dtype=int)
            aux_mesh.node_sets["_gamma"] = gamma_aux
            lmesh_loads = loads.filter_for(lmesh)
            aux_loads = loads.filter_for(aux_mesh)
            local_model = Model(lmesh, params, lmesh_loads, extra_dirichlet_sets=(lset,), name=f"local_{k}")
            aux_model = Model(aux_mesh, params, aux_loads, extra_dirichlet_sets=("_gamma",), name=f"aux_{k}")
            transfer = build_transfer(gm.nodes[gamma_g], lmesh.nodes[gamma_l])
            self.zones.append(
                Zone(f"zone{k}", local_model, aux_model, transfer, gamma_g, gamma_l, gamma_aux, np.asarray(aux_ids), node_map)
            )
        self._pool = ThreadPoolExecutor(max_workers=max(1, threads))

    # ------------------------------------------------------------------
    def interface_values(self, u_global: np.ndarray, zone: Zone) -> np.ndarray:
        return u_global[zone.gamma_g_dofs]

    def _warm_start(self, chk, t_a, amplitude) -> list[np.ndarray]:
        if self.warm_start == "cold":
            return [np.zeros(2 * z.gamma_g.size) for z in self.zones]
        scale = 1.0
        if self.warm_start == "scaled":
            a_c, a_a = float(amplitude(chk.t)), float(amplitude(t_a))
            if abs(a_c) > 1.0e-12:
                scale = a_a / a_c
        return [p.copy() * scale for p in chk.P]

    def solve_aim(self, chk, t_a: float, amplitude, on_local_dp: str = "subdivide", collect_states: bool = True):
        """Run the fixed-point loop for the aim [chk.t, t_a] at fixed t_a.

        Raises DpExceeded from the global solve always, and from local
        solves when ``on_local_dp == "raise"`` (full time coupling).
        Returns an :class:`AimResult`.
        """
        t_c = chk.t
        state = CouplingState(P=self._warm_start(chk, t_a, amplitude), omega=self.omega0)
        p_prev = [p.copy() for p in chk.P]

        history: list[dict] = []
        r0 = None
        scale = 0.0
        result = None
        for i in range(self.max_gl_iters):
            out = self.gl_iteration(chk, t_a, state, amplitude, p_prev, on_local_dp)
            r = out["r"]
            state.r_prev, state.r_curr = state.r_curr, r
            norm = float(np.linalg.norm(r))
            if r0 is None:
                r0 = norm
            scale = max(scale, out["reaction_scale"])
            rel = norm / r0 if r0 > 0.0 else 0.0
            state.residual_history.append(norm)
            history.append(
                {
                    "iter": i,
                    "residual_norm": norm,
                    "relative_residual": rel,
                    "omega": state.omega,
                    "local_ats": out["local_ats"],
                }
            )
            converged = norm <= max(self.tol * r0, 1.0e-12 * max(scale, 1.0e-30))
            if converged:
                return AimResult(
                    t_a=t_a,
                    converged=True,
                    iterations=i + 1,
                    coupling=state,
                    history=history,
                    global_state=out["global_state"],
                    local_states=out["local_states"],
                    aux_states=out["aux_states"],
                    global_records=out["global_records"],
                    local_records=out["local_records"],
                    aux_records=out["aux_records"],
                )
            accelerate(state, self.acceleration)
            state.iter = i + 1
        if self.on_max_iters == "error":
            raise MaxIterations(
                f"coupling at t={t_a:g} did not reach {self.tol:g} in {self.max_gl_iters} iterations"
            )
        return AimResult(
            t_a=t_a,
            converged=False,
            iterations=self.max_gl_iters,
            coupling=state,
            history=history,
            global_state=out["global_state"],
            local_states=out["local_states"],
            aux_states=out["aux_states"],
            global_records=out["global_records"],
            local_records=out["local_records"],
            aux_records=out["aux_records"],
        )

    def gl_iteration(self, chk, t_a, state: CouplingState, amplitude, p_prev, on_local_dp):
        """One full cycle: global solve, local+aux solves, interface residual."""
        t_c = chk.t
        span = t_a - t_c

        def extra_load(t):
            tau = 0.0 if span == 0.0 else (t - t_c) / span
            f = np.zeros(self.global_model.n_dof)
            for z, p0, p1 in zip(self.zones, p_prev, state.P):
                f[z.gamma_g_dofs] += p0 + tau * (p1 - p0)
            return f

        g_state, g_records = solve_increment(
            self.global_model,
            chk.global_state,
            t_c,
            t_a,
            self.policy,
            amplitude,
            extra_load=extra_load,
            on_dp="raise",
        )

        # boundary data: interpolate the interface displacement in time
        u_g_now = [self.interface_values(g_state.u, z) for z in self.zones]
        u_g_old = [self.interface_values(chk.global_state.u, z) for z in self.zones]

        def run_local(k: int):
            z = self.zones[k]
            ug0, ug1 = u_g_old[k], u_g_now[k]
            d0 = z.transfer.apply_displacement(ug0)
            d1 = z.transfer.apply_displacement(ug1)

            def dirichlet(t):
                tau = 0.0 if span == 0.0 else (t - t_c) / span
                return d0 + tau * (d1 - d0)

            captured = {}

            def keep(t, st, f_int, f_ext):
                captured["f"] = (f_int, f_ext)

            st, recs = solve_increment(
                z.local_model, chk.local_states[k], t_c, t_a, self.policy, amplitude,
                dirichlet=dirichlet, on_dp=on_local_dp, on_accept=keep,
            )
            f_int, f_ext = captured["f"]
            lam = z.local_model.reactions(f_int, f_ext, z.gamma_l)
            return st, recs, lam

        def run_aux(k: int):
            z = self.zones[k]
            ug0, ug1 = u_g_old[k], u_g_now[k]

            def dirichlet(t):
                tau = 0.0 if span == 0.0 else (t - t_c) / span
                return ug0 + tau * (ug1 - ug0)

            captured = {}

            def keep(t, st, f_int, f_ext):
                captured["f"] = (f_int, f_ext)

            st, recs = solve_increment(
                z.aux_model, chk.aux_states[k], t_c, t_a, self.policy, amplitude,
                dirichlet=dirichlet, on_dp="subdivide", on_accept=keep,
            )
            f_int, f_ext = captured["f"]
            lam = z.aux_model.reactions(f_int, f_ext, z.gamma_aux)
            return st, recs, lam

        nz = len(self.zones)
        futures = [self._pool.submit(run_local, k) for k in range(nz)]
        futures += [self._pool.submit(run_aux, k) for k in range(nz)]
        local_out = [futures[k].result() for k in range(nz)]
        aux_out = [futures[nz + k].result() for k in range(nz)]

        r_parts, scale = [], 0.0
        local_ats = 0
        for z, p_i, (lst, lrecs, lam_l), (ast, arecs, lam_a) in zip(
            self.zones, state.P, local_out, aux_out
        ):
            tl = z.transfer.distribute_force(lam_l)
            r_parts.append(lam_a - p_i - tl)
            scale = max(scale, float(np.linalg.norm(lam_a)) + float(np.linalg.norm(tl)))
            local_ats += sum(r.cutbacks.count("dp_exceeded") for r in lrecs)
        return {
            "r": np.concatenate(r_parts),
            "reaction_scale": scale,
            "global_state": g_state,
            "global_records": g_records,
            "local_states": [o[0] for o in local_out],
            "local_records": [o[1] for o in local_out],
            "aux_states": [o[0] for o in aux_out],
            "aux_records": [o[1] for o in aux_out],
            "local_ats": local_ats,
        }


@dataclass
class AimResult:
    t_a: float
    converged: bool
    iterations: int
    coupling: CouplingState
    history: list[dict]
    global_state: FieldState
    local_states: list[FieldState]
    aux_states: list[FieldState]
    global_records: list
    local_records: list[list]
    aux_records: list[list]


def assemble_gl_solution(
    partition: DomainPartition,
    reference_mesh: Mesh,
    global_state: FieldState,
    local_states: list[FieldState],
    tol: float = 1.0e-6,
):
    """Merge local fields (in the zones) and the global field (complement)
    onto the reference mesh.

    Displacements are mapped node-to-node, which requires the reference
    mesh to share nodes with the local meshes in the zones and with the
    global mesh elsewhere (the shipped reference meshes are built that
    way).  Gauss-point data is returned as a coordinate-tagged table and
    does not require matching.

    Returns (u_reference, gp_table dict).
    """
    from scipy.spatial import cKDTree

    gm = partition.global_mesh
    u_ref = np.full(2 * reference_mesh.n_nodes, np.nan)
    claimed = np.zeros(reference_mesh.n_nodes, dtype=bool)
    ref_tree = cKDTree(reference_mesh.nodes)
    for lmesh, lstate in zip(partition.local_meshes, local_states):
        dist, idx = ref_tree.query(lmesh.nodes)
        ok = dist <= tol
        tgt = idx[ok]
        u_ref[2 * tgt] = lstate.u[0::2][ok]
        u_ref[2 * tgt + 1] = lstate.u[1::2][ok]
        claimed[tgt] = True
    dist, idx = ref_tree.query(gm.nodes)
    ok = dist <= tol
    for g_node, r_node in zip(np.nonzero(ok)[0], idx[ok]):
        if not claimed[r_node]:
            u_ref[2 * r_node] = global_state.u[2 * g_node]
            u_ref[2 * r_node + 1] = global_state.u[2 * g_node + 1]
            claimed[r_node] = True
    if not np.all(claimed):
        missing = int(np.count_nonzero(~claimed))
        raise ValueError(f"{missing} reference nodes not covered by the merged fields")
    return u_ref, merged_gp_table(partition, global_state, local_states)


def merged_gp_table(
    partition: DomainPartition,
    global_state: FieldState,
    local_states: list[FieldState],
):
    """Coordinate-tagged Gauss-point table of the merged global/local field:
    global points on the complement, local points in the zones."""
    gm = partition.global_mesh
    comp = partition.complement_elements()
    gp_xy = [gm.gauss_points()[comp].reshape(-1, 2)]
    comp_gp = (comp[:, None] * 4 + np.arange(4)[None, :]).ravel()
    sigma = [global_state.sigma[comp_gp]]
    p_f = [global_state.gp.p_f[comp_gp]]
    p_s = [global_state.gp.p_s[comp_gp]]
    source = [np.full(comp_gp.size, "global", dtype=object)]
    for k, (lmesh, lstate) in enumerate(zip(partition.local_meshes, local_states)):
        gp_xy.append(lmesh.gauss_points().reshape(-1, 2))
        sigma.append(lstate.sigma)
        p_f.append(lstate.gp.p_f)
        p_s.append(lstate.gp.p_s)
        source.append(np.full(lstate.gp.p_f.size, f"local_{k}", dtype=object))
    sigma = np.vstack(sigma)
    return {
        "xy": np.vstack(gp_xy),
        "sigma": sigma,
        "von_mises": j2(sigma),
        "p_f": np.concatenate(p_f),
        "p_s": np.concatenate(p_s),
        "source": np.concatenate(source),
    }
