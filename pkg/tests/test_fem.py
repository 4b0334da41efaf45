from __future__ import annotations

import numpy as np
import pytest

from glofem.errors import UnknownSet
from glofem.fem import BodyForce, FieldState, LoadCase, Model, assemble_external, extract_reactions
from glofem.material import StateBatch
from glofem.mesh import Mesh, rect_grid, submesh
from glofem.solver import SteppingPolicy, newton_step

from oracles import quad_body_force


def elastic_d_eng(params):
    lam, mu = params.lam, params.mu
    return np.array(
        [[lam + 2 * mu, lam, 0.0], [lam, lam + 2 * mu, 0.0], [0.0, 0.0, mu]]
    )


def static_solve(model, amplitude=1.0, dirichlet=None, dt=0.0, state=None, extra_load=None):
    """One Newton solve over a zero-time increment (dt=0 is purely elastic)."""
    state = state or FieldState.virgin(model.mesh.n_nodes, model.mesh.n_elements)
    pol = SteppingPolicy(dp_max=float("inf"))
    new, f_int, f_ext, iters, dp = newton_step(
        model, state, 0.0, dt, pol,
        amplitude=lambda t: amplitude, dirichlet=dirichlet, extra_load=extra_load,
    )
    return new, f_int, f_ext


def distorted_patch() -> Mesh:
    mesh = rect_grid(0.0, 0.0, 3.0, 3.0, 3, 3)
    interior = [i for i in range(mesh.n_nodes) if 0.0 < mesh.nodes[i, 0] < 3.0 and 0.0 < mesh.nodes[i, 1] < 3.0]
    shifts = {interior[0]: (0.21, -0.13), interior[1]: (-0.17, 0.22), interior[2]: (0.12, 0.18), interior[3]: (-0.08, -0.24)}
    for nid, (dx, dy) in shifts.items():
        mesh.nodes[nid] += (dx, dy)
    mesh.node_sets["boundary"] = np.array(sorted(set(range(mesh.n_nodes)) - set(interior)))
    mesh.node_sets["interior"] = np.array(interior)
    return mesh


class TestAssembly:
    def test_virgin_zero_displacement(self, params):
        mesh = rect_grid(0, 0, 2, 1, 2, 1)
        model = Model(mesh, params, LoadCase())
        f_int, k, _, _, dp = model.assemble_internal(np.zeros(model.n_dof), StateBatch.zeros(8), 0.0)
        assert np.allclose(f_int, 0.0, atol=1e-14)
        assert dp == 0.0
        # tangent equals the elastic stiffness assembled by hand
        d = elastic_d_eng(params)
        ke = np.einsum("egai,ab,egbj,eg->eij", model.b_mats, d, model.b_mats, model.wdet)
        import scipy.sparse as sp

        k_ref = sp.coo_matrix((ke.ravel(), (model.k_rows, model.k_cols)), shape=(model.n_dof,) * 2).tocsr()
        assert abs(k - k_ref).max() < 1e-9 * abs(k_ref).max()

    def test_single_element_affine_field(self, params):
        mesh = rect_grid(0, 0, 1, 1, 1, 1)
        model = Model(mesh, params, LoadCase())
        a = np.array([[1.3e-3, 0.4e-3], [-0.2e-3, 0.9e-3]])
        u = (mesh.nodes @ a.T).ravel()
        eps = model.strains(u)
        assert np.allclose(eps, eps[0], atol=1e-18)
        _, _, _, sigma, _ = model.assemble_internal(u, StateBatch.zeros(4), 0.0)
        assert np.allclose(sigma, sigma[0], rtol=1e-12)

    def test_patch_test_distorted(self, params):
        # elastic patch test: affine boundary data reproduces the constant
        # stress field exactly at interior points
        mesh = distorted_patch()
        model = Model(mesh, params, LoadCase(), extra_dirichlet_sets=("boundary",), name="patch")
        a = np.array([[1.1e-3, 0.35e-3], [0.15e-3, -0.6e-3]])

        def affine_values(t):
            dofs = model.extra_dofs
            vals = (mesh.nodes @ a.T).ravel()
            return vals[dofs]

        state, f_int, _ = static_solve(model, dirichlet=affine_values)
        eps_exact = 0.5 * (a + a.T)
        lam, mu = params.lam, params.mu
        sig_exact = lam * np.trace(eps_exact) * np.eye(3)
        sig_exact[:2, :2] += 2 * mu * eps_exact
        got = state.sigma
        ref = np.array([sig_exact[0, 0], sig_exact[1, 1], sig_exact[2, 2], sig_exact[0, 1]])
        assert np.allclose(got, ref[None, :], rtol=1e-10, atol=1e-10 * np.abs(ref).max())
        # interior displacement matches the affine field
        vals = (mesh.nodes @ a.T).ravel()
        assert np.allclose(state.u, vals, rtol=0, atol=1e-13)

    def test_k_symmetric_elastic(self, params):
        mesh = distorted_patch()
        model = Model(mesh, params, LoadCase())
        _, k, _, _, _ = model.assemble_internal(np.zeros(model.n_dof), StateBatch.zeros(4 * mesh.n_elements), 0.0)
        assert abs(k - k.T).max() <= 1e-9 * abs(k).max()


class TestExternalLoads:
    def test_zero_amplitude(self, params):
        mesh = rect_grid(0, 0, 2, 1, 2, 1)
        loads = LoadCase(pressure={"right": 5.0}, body_force=BodyForce(0.3, -1.0))
        assert np.allclose(assemble_external(mesh, loads, 0.0), 0.0)

    def test_pressure_resultant(self, params):
        # unit pressure on the right edge (length 1): resultant = 1 * L along -x
        mesh = rect_grid(0, 0, 2, 1, 4, 2)
        f = assemble_external(mesh, LoadCase(pressure={"right": 1.0}), 1.0)
        assert f[0::2].sum() == pytest.approx(-1.0, abs=1e-14)
        assert f[1::2].sum() == pytest.approx(0.0, abs=1e-14)

    def test_pressure_inward_on_all_edges(self, params):
        # a uniformly pressurized boundary has zero resultant
        mesh = rect_grid(0, 0, 2, 1, 2, 1)
        loads = LoadCase(pressure={"left": 3.0, "right": 3.0, "top": 3.0, "bottom": 3.0})
        f = assemble_external(mesh, loads, 1.0)
        assert abs(f[0::2].sum()) < 1e-13 and abs(f[1::2].sum()) < 1e-13

    def test_centrifugal_vs_refined_quadrature(self, params):
        # distorted single element, 2x2 assembly against a 4x4 Gauss oracle
        nodes = np.array([[0.1, 0.0], [2.3, 0.2], [2.0, 1.4], [-0.1, 1.1]])
        mesh = Mesh(nodes, [[0, 1, 2, 3]], {"all": [0, 1, 2, 3]}, {})
        bf = BodyForce(coeff=0.7, axis_x=-2.0)
        f = assemble_external(mesh, LoadCase(body_force=bf), 1.0)
        ref = quad_body_force(nodes, lambda x, y: (0.7 * (x + 2.0), 0.0), n_gauss=4)
        order = np.empty(8)
        order[0::2] = ref[0::2]
        order[1::2] = ref[1::2]
        assert np.allclose(f, order, rtol=1e-6, atol=1e-12)

    def test_unknown_set_raises(self, params):
        mesh = rect_grid(0, 0, 1, 1, 1, 1)
        with pytest.raises(UnknownSet):
            assemble_external(mesh, LoadCase(pressure={"nope": 1.0}), 1.0)
        with pytest.raises(UnknownSet):
            Model(mesh, params, LoadCase(dirichlet={"nope": {"ux": 0.0}}))


class TestReactions:
    def test_free_body_zero_reactions(self, params):
        # self-equilibrated pressure, minimal pinning: reactions ~ 0
        mesh = rect_grid(0, 0, 2, 1, 4, 2)
        mesh.node_sets["pin2"] = np.array([mesh.node_sets["right"][0]])
        loads = LoadCase(
            pressure={"left": 2.0, "right": 2.0},
            dirichlet={"corner_bl": {"ux": 0.0, "uy": 0.0}, "pin2": {"uy": 0.0}},
        )
        model = Model(mesh, params, loads)
        state, f_int, f_ext = static_solve(model)
        lam = model.reactions(f_int, f_ext, np.arange(mesh.n_nodes))
        assert np.abs(lam).max() < 1e-7 * max(1.0, np.abs(f_ext).max())

    def test_strip_reaction_resultant(self, params):
        # subdomain [1,2]x[0,1] held at its left boundary, pulled at x=2 by
        # a traction F: reaction resultant at the interface equals -F
        mesh = rect_grid(1.0, 0.0, 1.0, 1.0, 2, 2)
        mesh.node_sets["interface"] = mesh.node_sets["left"]
        loads = LoadCase(pressure={"right": -3.0})  # negative pressure = tension
        model = Model(mesh, params, loads, extra_dirichlet_sets=("interface",), name="strip")
        state, f_int, f_ext = static_solve(model, dirichlet=lambda t: np.zeros(model.extra_dofs.size))
        lam = model.reactions(f_int, f_ext, mesh.node_sets["interface"])
        # F = 3.0 * 1 mm * 1 mm thickness along +x
        assert lam[0::2].sum() == pytest.approx(-3.0, rel=1e-10)
        assert lam[1::2].sum() == pytest.approx(0.0, abs=1e-10)
        # standalone extraction api agrees
        prev = FieldState.virgin(mesh.n_nodes, mesh.n_elements)
        lam2 = extract_reactions(mesh, state, loads, 1.0, prev, mesh.node_sets["interface"], params)
        assert np.allclose(lam, lam2, atol=1e-12)

    def test_complement_equals_minus_aux_monolithic(self, params):
        # at a monolithic equilibrium the complement-side and auxiliary-side
        # assemblies at the interface are equal and opposite
        mesh = rect_grid(0, 0, 4, 2, 8, 4)
        loads = LoadCase(
            pressure={"right": -5.0},
            body_force=BodyForce(0.4, -1.0),
            dirichlet={"left": {"ux": 0.0}, "corner_bl": {"uy": 0.0}},
        )
        model = Model(mesh, params, loads)
        state, f_int, f_ext = static_solve(model)

        centers = mesh.nodes[mesh.elements].mean(axis=1)
        aux_ids = np.nonzero(centers[:, 0] > 2.0)[0]
        comp_ids = np.nonzero(centers[:, 0] < 2.0)[0]
        gamma = np.nonzero(np.abs(mesh.nodes[:, 0] - 2.0) < 1e-9)[0]

        lam_sides = []
        for ids in (comp_ids, aux_ids):
            sub, nmap = submesh(mesh, ids)
            sub_loads = loads.filter_for(sub)
            sub_loads.dirichlet = {}
            m = Model(sub, params, sub_loads)
            u_sub = np.empty(m.n_dof)
            u_sub[0::2] = state.u[2 * nmap]
            u_sub[1::2] = state.u[2 * nmap + 1]
            fi, _, _, _, _ = m.assemble_internal(u_sub, StateBatch.zeros(4 * sub.n_elements), 0.0)
            gamma_local = np.array([np.nonzero(nmap == g)[0][0] for g in gamma])
            lam_sides.append(m.reactions(fi, m.f_ext(1.0), gamma_local))
        assert np.allclose(lam_sides[0], -lam_sides[1], atol=1e-10 * max(1.0, np.abs(lam_sides[1]).max()))

    def test_force_balance(self, params):
        # sum of reactions over constrained nodes balances total applied load
        mesh = rect_grid(0, 0, 4, 2, 8, 4)
        loads = LoadCase(
            pressure={"right": -5.0},
            body_force=BodyForce(0.4, -1.0),
            dirichlet={"left": {"ux": 0.0}, "corner_bl": {"uy": 0.0}},
        )
        model = Model(mesh, params, loads)
        state, f_int, f_ext = static_solve(model)
        resid = f_int - f_ext
        # x-balance: reactions on the clamped edge oppose the whole applied load
        rx = resid[model.fixed_dofs[model.fixed_dofs % 2 == 0]].sum()
        fx = f_ext[0::2].sum()
        assert rx == pytest.approx(-fx, rel=1e-8)
        assert abs(resid[model.free_dofs]).max() < 1e-8 * max(1.0, np.abs(f_ext).max())
