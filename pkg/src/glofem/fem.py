"""Plane-strain Q4 finite-element machinery.

Assembly of internal forces and algorithmic tangent stiffness, consistent
external loads (edge pressure + centrifugal body force, both evaluated on
the undeformed geometry), Dirichlet handling by row/column elimination
with exact reaction recovery, and nodal reaction extraction.

Units are MPa-mm-N-s with unit thickness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import NoConvergence, UnknownSet
from .material import MaterialParams, StateBatch, integrate_batch
from .mesh import GP_COORDS, Mesh, shape_gradients

_COMP = {"ux": 0, "uy": 1}


@dataclass
class BodyForce:
    """Centrifugal-like volume load f_x = coeff * (x - axis_x), f_y = 0."""

    coeff: float          # [N/mm^4] (rho * omega^2 per unit thickness)
    axis_x: float = 0.0   # rotation axis position [mm]


@dataclass
class LoadCase:
    pressure: dict[str, float] = field(default_factory=dict)
    body_force: BodyForce | None = None
    dirichlet: dict[str, dict[str, float]] = field(default_factory=dict)

    def filter_for(self, mesh: Mesh) -> "LoadCase":
        """Restrict to the sets present in ``mesh`` (used by sub-models)."""
        return LoadCase(
            pressure={k: v for k, v in self.pressure.items() if k in mesh.side_sets},
            body_force=self.body_force,
            dirichlet={k: v for k, v in self.dirichlet.items() if k in mesh.node_sets},
        )


@dataclass
class FieldState:
    """Displacements plus per-Gauss-point internal variables and stresses."""

    u: np.ndarray          # (2*n_nodes,)
    gp: StateBatch         # n_el*4 points, element-major
    sigma: np.ndarray      # (n_el*4, 4)

    def copy(self) -> "FieldState":
        return FieldState(self.u.copy(), self.gp.copy(), self.sigma.copy())

    @classmethod
    def virgin(cls, n_nodes: int, n_elements: int) -> "FieldState":
        return cls(np.zeros(2 * n_nodes), StateBatch.zeros(4 * n_elements), np.zeros((4 * n_elements, 4)))


class Model:
    """A mesh + material + load case with precomputed assembly data.

    The model itself is stateless: every solve receives and returns
    :class:`FieldState` values, so independent models can run on separate
    threads safely.
    """

    def __init__(
        self,
        mesh: Mesh,
        params: MaterialParams,
        loads: LoadCase,
        extra_dirichlet_sets: tuple[str, ...] = (),
        name: str = "model",
    ):
        mesh.validate()
        self.mesh = mesh
        self.params = params
        self.loads = loads
        self.name = name

        ne = mesh.n_elements
        coords = mesh.nodes[mesh.elements]  # (ne, 4, 2)
        self.b_mats = np.zeros((ne, 4, 3, 8))
        self.wdet = np.zeros((ne, 4))
        for g, (xi, eta) in enumerate(GP_COORDS):
            _, dn = shape_gradients(xi, eta)
            jac = np.einsum("ak,nkc->nac", dn, coords)          # (ne, 2, 2)
            det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
            inv = np.empty_like(jac)
            inv[:, 0, 0] = jac[:, 1, 1]
            inv[:, 1, 1] = jac[:, 0, 0]
            inv[:, 0, 1] = -jac[:, 0, 1]
            inv[:, 1, 0] = -jac[:, 1, 0]
            inv /= det[:, None, None]
            grad = np.einsum("nab,bk->nak", inv, dn)            # (ne, 2, 4) d/dx, d/dy
            self.wdet[:, g] = det                               # 2x2 Gauss weights are 1
            self.b_mats[:, g, 0, 0::2] = grad[:, 0, :]
            self.b_mats[:, g, 1, 1::2] = grad[:, 1, :]
            self.b_mats[:, g, 2, 0::2] = grad[:, 1, :]
            self.b_mats[:, g, 2, 1::2] = grad[:, 0, :]

        self.edofs = np.empty((ne, 8), dtype=int)
        self.edofs[:, 0::2] = 2 * mesh.elements
        self.edofs[:, 1::2] = 2 * mesh.elements + 1
        self.k_rows = np.repeat(self.edofs, 8, axis=1).ravel()
        self.k_cols = np.tile(self.edofs, (1, 8)).ravel()
        self.n_dof = 2 * mesh.n_nodes

        # Dirichlet bookkeeping: load-case values scale with the amplitude,
        # extra sets (interfaces) receive values per solve.
        fixed: dict[int, float] = {}
        for set_name, comps in loads.dirichlet.items():
            if set_name not in mesh.node_sets:
                raise UnknownSet(f"dirichlet set '{set_name}' not in mesh")
            for comp, value in comps.items():
                for nid in mesh.node_sets[set_name]:
                    fixed[2 * int(nid) + _COMP[comp]] = float(value)
        self.bc_dofs = np.array(sorted(fixed), dtype=int)
        self.bc_values = np.array([fixed[d] for d in sorted(fixed)])

        extra: list[int] = []
        for set_name in extra_dirichlet_sets:
            if set_name not in mesh.node_sets:
                raise UnknownSet(f"interface set '{set_name}' not in mesh")
            for nid in mesh.node_sets[set_name]:
                extra.extend((2 * int(nid), 2 * int(nid) + 1))
        self.extra_dofs = np.array(sorted(set(extra) - set(self.bc_dofs.tolist())), dtype=int)

        self.fixed_dofs = np.concatenate([self.bc_dofs, self.extra_dofs]).astype(int)
        order = np.argsort(self.fixed_dofs, kind="stable")
        self.fixed_dofs = self.fixed_dofs[order]
        mask = np.ones(self.n_dof, dtype=bool)
        mask[self.fixed_dofs] = False
        self.free_dofs = np.nonzero(mask)[0]

        self.f_ext_unit = self._assemble_external_unit()

    # ------------------------------------------------------------------
    # external loads
    # ------------------------------------------------------------------
    def _assemble_external_unit(self) -> np.ndarray:
        f = np.zeros(self.n_dof)
        for set_name, p in self.loads.pressure.items():
            if set_name not in self.mesh.side_sets:
                raise UnknownSet(f"pressure side set '{set_name}' not in mesh")
            edges = self.mesh.side_sets[set_name]
            a = self.mesh.nodes[edges[:, 0]]
            b = self.mesh.nodes[edges[:, 1]]
            d = b - a                                 # CCW tangent
            # outward normal (dy, -dx); pressure pushes along the inward normal
            fx = -p * d[:, 1] / 2.0
            fy = p * d[:, 0] / 2.0
            for col, comp in ((0, fx), (1, fy)):
                np.add.at(f, 2 * edges[:, 0] + col, comp)
                np.add.at(f, 2 * edges[:, 1] + col, comp)
        if self.loads.body_force is not None:
            bf = self.loads.body_force
            coords = self.mesh.nodes[self.mesh.elements]
            fe = np.zeros((self.mesh.n_elements, 8))
            for g, (xi, eta) in enumerate(GP_COORDS):
                n, _ = shape_gradients(xi, eta)
                xg = np.einsum("k,nk->n", n, coords[:, :, 0])
                dens = bf.coeff * (xg - bf.axis_x)
                fe[:, 0::2] += self.wdet[:, g][:, None] * n[None, :] * dens[:, None]
            np.add.at(f, self.edofs.ravel(), fe.ravel())
        return f

    def f_ext(self, amplitude: float) -> np.ndarray:
        """Consistent nodal loads on the undeformed geometry, scaled linearly."""
        return amplitude * self.f_ext_unit

    # ------------------------------------------------------------------
    # internal forces / tangent
    # ------------------------------------------------------------------
    def strains(self, u: np.ndarray) -> np.ndarray:
        """Tensorial strain 4-vectors at all Gauss points, shape (ne*4, 4)."""
        ue = u[self.edofs]                                    # (ne, 8)
        eng = np.matmul(self.b_mats, ue[:, None, :, None])[..., 0]  # (ne, 4, 3)
        out = np.zeros((self.mesh.n_elements * 4, 4))
        out[:, 0] = eng[:, :, 0].ravel()
        out[:, 1] = eng[:, :, 1].ravel()
        out[:, 3] = 0.5 * eng[:, :, 2].ravel()
        return out

    def assemble_internal(self, u: np.ndarray, prev: StateBatch, dt: float, want_matrix: bool = True):
        """Integrate all Gauss points and assemble f_int (and K_t).

        Returns (f_int, K_t or None, trial_states, trial_sigma, dp_max_observed).
        Material failures are re-raised with the offending element id.
        """
        ne = self.mesh.n_elements
        eps = self.strains(u)
        try:
            new_states, sigma, tangent, dpf = integrate_batch(
                prev, eps, dt, self.params, want_tangent=want_matrix
            )
        except NoConvergence as exc:
            raise NoConvergence(
                f"{self.name}: {exc} (element {exc.element // 4 if exc.element is not None else '?'})",
                element=None if exc.element is None else exc.element // 4,
            ) from exc

        sig_eng = sigma[:, [0, 1, 3]].reshape(ne, 4, 3)
        bt = self.b_mats.transpose(0, 1, 3, 2)                       # (ne, 4, 8, 3)
        fe_g = np.matmul(bt, (sig_eng * self.wdet[:, :, None])[..., None])[..., 0]
        fe = fe_g.sum(axis=1)                                        # (ne, 8)
        f_int = np.zeros(self.n_dof)
        np.add.at(f_int, self.edofs.ravel(), fe.ravel())

        k = None
        if want_matrix:
            d_eng = tangent.reshape(ne, 4, 4, 4)[:, :, [0, 1, 3]][:, :, :, [0, 1, 3]]
            d_eng = d_eng.copy()
            d_eng[:, :, :, 2] *= 0.5  # engineering shear column
            db = np.matmul(d_eng, self.b_mats)                       # (ne, 4, 3, 8)
            ke = np.matmul(bt * self.wdet[:, :, None, None], db).sum(axis=1)
            k = sp.coo_matrix(
                (ke.ravel(), (self.k_rows, self.k_cols)), shape=(self.n_dof, self.n_dof)
            ).tocsr()
        dp_max = float(dpf.max()) if dpf.size else 0.0
        return f_int, k, new_states, sigma, dp_max

    # ------------------------------------------------------------------
    # reactions
    # ------------------------------------------------------------------
    def reactions(self, f_int: np.ndarray, f_ext: np.ndarray, node_ids: np.ndarray) -> np.ndarray:
        """Nodal reaction f_int - f_ext at the given nodes, shape (2*len,).

        This is the discrete version of the boundary-integral reaction:
        at equilibrium it vanishes on free nodes and returns the force the
        model transmits at constrained/interface nodes.
        """
        dofs = np.empty(2 * len(node_ids), dtype=int)
        dofs[0::2] = 2 * np.asarray(node_ids, dtype=int)
        dofs[1::2] = dofs[0::2] + 1
        return (f_int - f_ext)[dofs]


def assemble_external(mesh: Mesh, loads: LoadCase, amplitude: float, params: MaterialParams | None = None) -> np.ndarray:
    """Standalone consistent external load vector (spec surface)."""
    dummy = params or MaterialParams(E=1.0, nu=0.0, C=0, D=0, R=1, n_f=1, K_f=1, n_s=1, K_s=1)
    model = Model(mesh, dummy, LoadCase(pressure=loads.pressure, body_force=loads.body_force))
    return model.f_ext(amplitude)


def extract_reactions(
    mesh: Mesh,
    field: FieldState,
    loads: LoadCase,
    dt: float,
    prev: FieldState,
    interface_nodes: np.ndarray,
    params: MaterialParams,
    amplitude: float = 1.0,
) -> np.ndarray:
    """Recompute reactions at ``interface_nodes`` from an equilibrium field."""
    model = Model(mesh, params, loads)
    f_int, _, _, _, _ = model.assemble_internal(field.u, prev.gp, dt, want_matrix=False)
    return model.reactions(f_int, model.f_ext(amplitude), interface_nodes)
