from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import glofem.material as mat
from glofem.errors import NoConvergence, OverflowGuard
from glofem.material import (
    MaterialParams,
    MaterialState,
    StateBatch,
    StressPoint,
    elastic_matrix,
    elastic_tangent,
    flow_rates,
    integrate_batch,
    integrate_point,
    yield_function,
)
from glofem.tensors import from_matrix

from oracles import forward_euler_point, norton_power

# forward-Euler reference (n_sub = 320000) for the virgin single-step case
# eps = diag(0.002, -0.0006, -0.0006), dt = 2 s, Table-1-like parameters
_FE_REF_SIGMA_XX = 301.864448
_FE_REF_P_F = 8.77051044e-08


def uniaxial(s: float) -> np.ndarray:
    return np.diag([s, 0.0, 0.0])


class TestParams:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            MaterialParams(E=-1, nu=0.3, C=0, D=0, R=0, n_f=1, K_f=1, n_s=1, K_s=1)
        with pytest.raises(ValueError):
            MaterialParams(E=1, nu=0.5, C=0, D=0, R=0, n_f=1, K_f=1, n_s=1, K_s=1)
        with pytest.raises(ValueError):
            MaterialParams(E=1, nu=0.3, C=0, D=0, R=0, n_f=0.5, K_f=1, n_s=1, K_s=1)

    def test_from_mapping_roundtrip(self, params):
        d = {k: getattr(params, k) for k in ("E", "nu", "C", "D", "R", "n_f", "K_f", "n_s", "K_s")}
        assert MaterialParams.from_mapping(d) == params
        with pytest.raises(ValueError, match="missing"):
            MaterialParams.from_mapping({"E": 1.0})


class TestYieldFunction:
    def test_uniaxial(self, params):
        f = yield_function(StressPoint(uniaxial(100.0)), np.zeros((3, 3)), params)
        assert f == pytest.approx(20.0, abs=1e-12)

    def test_zero_stress(self, params):
        f = yield_function(StressPoint(np.zeros((3, 3))), np.zeros((3, 3)), params)
        assert f == pytest.approx(-80.0, abs=1e-12)

    def test_hydrostatic(self, params):
        f = yield_function(StressPoint(123.4 * np.eye(3)), np.zeros((3, 3)), params)
        assert f == pytest.approx(-80.0, abs=1e-10)


class TestFlowRates:
    def test_unit_base_slow(self, params):
        pf, ps = flow_rates(StressPoint(uniaxial(0.0)), np.zeros((3, 3)), params)
        assert pf == 0.0 and ps == 0.0
        # deviatoric state with J2 = K_s = 1300
        sig = np.diag([2.0 / 3.0 * 1300.0, -1300.0 / 3.0, -1300.0 / 3.0])
        _, ps = flow_rates(StressPoint(sig), np.zeros((3, 3)), params)
        assert ps == pytest.approx(1.0, rel=1e-12)
        # backstress equal to the deviator kills the fast mechanism (f <= 0)
        pf2, _ = flow_rates(StressPoint(sig), sig, params)
        assert pf2 == 0.0

    def test_derived_half_base(self, params):
        # J2 = 650 -> slow base 0.5; expected value from the scalar oracle
        sig = np.diag([650.0 * 2.0 / 3.0, -650.0 / 3.0, -650.0 / 3.0])
        _, ps = flow_rates(StressPoint(sig), np.zeros((3, 3)), params)
        assert ps == pytest.approx(norton_power(0.5, 17.2), rel=1e-12)
        assert ps == pytest.approx(6.63e-6, rel=5e-3)

    def test_negative_f_gives_zero_fast(self, params):
        pf, _ = flow_rates(StressPoint(uniaxial(50.0)), np.zeros((3, 3)), params)
        assert pf == 0.0

    def test_overflow_guard(self, params):
        with pytest.raises(OverflowGuard):
            flow_rates(StressPoint(uniaxial(20.0 * 1300.0)), np.zeros((3, 3)), params)


class TestElasticTangent:
    def test_shear_modulus(self, params):
        c = elastic_matrix(params)
        mu = params.E / (2.0 * (1.0 + params.nu))
        assert mu == pytest.approx(60156.25)
        assert c[3, 3] == pytest.approx(2.0 * mu)

    def test_nu_zero_diagonal(self):
        p = MaterialParams(E=100.0, nu=0.0, C=0, D=0, R=1, n_f=1, K_f=1, n_s=1, K_s=1)
        c = elastic_matrix(p)
        assert np.allclose(c, np.diag(np.diag(c)))
        assert c[0, 0] == pytest.approx(100.0)

    def test_symmetries_exact(self, params):
        t = elastic_tangent(params)
        assert np.array_equal(t, np.swapaxes(t, 0, 1))
        assert np.array_equal(t, np.swapaxes(np.swapaxes(t, 0, 2), 1, 3))
        assert np.array_equal(t, t.transpose(2, 3, 0, 1))


class TestIntegratePoint:
    def test_zero_increment(self, params):
        st = MaterialState.virgin()
        eps = np.diag([1e-3, -2e-4, 0.0])
        new, sp, tan, dpf = integrate_point(st, eps, eps, 0.0, params)
        assert dpf == 0.0
        assert new.p_f == 0.0 and new.p_s == 0.0
        # dt = 0 reduces to the elastic relation
        lam, mu = params.lam, params.mu
        sig_el = lam * np.trace(eps) * np.eye(3) + 2 * mu * eps
        assert np.allclose(sp.sigma, sig_el, rtol=1e-12, atol=1e-9)

    def test_single_step_stress_vs_oracle(self, params):
        eps = np.diag([0.002, -0.0006, -0.0006])
        st = MaterialState.virgin()
        _, sp, _, _ = integrate_point(st, np.zeros((3, 3)), eps, 2.0, params)
        assert sp.sigma[0, 0] == pytest.approx(_FE_REF_SIGMA_XX, rel=1e-3)

    def test_substepped_consistency_with_oracle(self, params):
        # the implicit path converges to the same limit as the explicit oracle
        eps = np.diag([0.002, -0.0006, -0.0006])
        stb = StateBatch.zeros(1)
        n_sub = 2000
        e4 = from_matrix(eps)
        sig = None
        for k in range(1, n_sub + 1):
            stb, sig, _, _ = integrate_batch(stb, (k / n_sub) * e4[None, :], 2.0 / n_sub, params, want_tangent=False)
        assert sig[0, 0] == pytest.approx(_FE_REF_SIGMA_XX, rel=1e-5)
        assert stb.p_f[0] == pytest.approx(_FE_REF_P_F, rel=1e-2)

    @pytest.mark.parametrize("rate", [1e-4, 1e-3, 1e-2])
    def test_oracle_equivalence_matrix(self, params, rate):
        # developed flow: pre-strain with the oracle, then one implicit step
        # against an explicit continuation, for three increment sizes
        eps0 = np.diag([0.004, -0.0012, -0.0012])
        pre = forward_euler_point(params, np.zeros((3, 3)), eps0, 0.004 / rate, n_sub=20000)
        for deps in (1e-5, 2e-5, 5e-5):
            d = np.diag([deps, -0.3 * deps, -0.3 * deps])
            dt = deps / rate
            ref = forward_euler_point(params, eps0, eps0 + d, dt, n_sub=10000, state=pre)
            st = MaterialState(pre["eps_p_f"], pre["eps_p_s"], pre["X_f"], pre["p_f"], pre["p_s"])
            new, sp, _, _ = integrate_point(st, eps0, eps0 + d, dt, params)
            assert sp.sigma[0, 0] == pytest.approx(ref["sigma"][0, 0], rel=1e-3)
            assert new.p_f == pytest.approx(ref["p_f"], rel=1e-3)

    def test_overflow_guard_on_runaway(self, params):
        # with dt = 0 no flow can relax the state, so the converged bases
        # stay beyond the cap and the guard must fire
        st = MaterialState.virgin()
        with pytest.raises(OverflowGuard):
            integrate_point(st, np.zeros((3, 3)), np.diag([0.2, 0.0, 0.0]), 0.0, params)

    def test_no_convergence_signal(self, params, monkeypatch):
        monkeypatch.setattr(mat, "_NEWTON_MAX_ITER", 1)
        st = MaterialState.virgin()
        with pytest.raises(NoConvergence):
            integrate_point(st, np.zeros((3, 3)), np.diag([0.01, -0.003, -0.003]), 1.0, params)


class TestConsistentTangent:
    @staticmethod
    def _fd_tangent(state, eps, dt, params, h=1e-7):
        t = np.zeros((3, 3, 3, 3))
        for k in range(3):
            for l in range(k, 3):
                de = np.zeros((3, 3))
                de[k, l] += h
                if k != l:
                    de[l, k] += h
                _, sp_p, _, _ = integrate_point(state, None, eps + de, dt, params)
                _, sp_m, _, _ = integrate_point(state, None, eps - de, dt, params)
                d = (sp_p.sigma - sp_m.sigma) / (2 * h)
                if k == l:
                    t[:, :, k, l] = d
                else:
                    t[:, :, k, l] = d / 2
                    t[:, :, l, k] = d / 2
        return t

    @pytest.mark.parametrize(
        "eps,dt",
        [
            (np.diag([1e-4, -3e-5, -3e-5]), 1.0),        # elastic
            (np.diag([0.004, -0.0012, -0.0012]), 1.0),   # fast mechanism active
            (np.diag([4e-4, -1.2e-4, -1.2e-4]), 1000.0), # slow mechanism only
        ],
        ids=["elastic", "fast-active", "slow-only"],
    )
    def test_tangent_matches_fd(self, params, eps, dt):
        st = MaterialState.virgin()
        _, _, tan, _ = integrate_point(st, None, eps, dt, params)
        fd = self._fd_tangent(st, eps, dt, params)
        err = np.linalg.norm(tan - fd) / np.linalg.norm(fd)
        assert err < 1e-5


class TestStateInvariants:
    @staticmethod
    def _run_path(params, seed: int, n_steps: int):
        rng = np.random.default_rng(seed)
        stb = StateBatch.zeros(1)
        eps = np.zeros(4)
        pf_hist, ps_hist = [0.0], [0.0]
        for _ in range(n_steps):
            eps = eps + rng.uniform(-1.5e-3, 1.5e-3, size=4)
            dt = float(rng.uniform(0.01, 5.0))
            stb, sig, _, dpf = integrate_batch(stb, eps[None, :], dt, params, want_tangent=False)
            pf_hist.append(float(stb.p_f[0]))
            ps_hist.append(float(stb.p_s[0]))
        return stb, pf_hist, ps_hist

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_monotonicity_and_incompressibility(self, params, seed):
        stb, pf, ps = self._run_path(params, seed, 6)
        assert all(b >= a for a, b in zip(pf, pf[1:]))
        assert all(b >= a for a, b in zip(ps, ps[1:]))
        # plastic incompressibility, exact by construction
        for arr in (stb.eps_p_f, stb.eps_p_s, stb.X_f):
            assert abs(arr[0, 0] + arr[0, 1] + arr[0, 2]) < 1e-12 * max(1.0, np.abs(arr).max())

    def test_rate_limit_elastic(self, params):
        st = MaterialState.virgin()
        eps = np.diag([0.003, -0.001, -0.001])
        new, sp, _, dpf = integrate_point(st, None, eps, 1e-14, params)
        lam, mu = params.lam, params.mu
        sig_el = lam * np.trace(eps) * np.eye(3) + 2 * mu * eps
        assert np.allclose(sp.sigma, sig_el, rtol=1e-8)
        assert new.p_f < 1e-12 and new.p_s < 1e-12

    def test_residual_plasticity_after_cycle(self, params):
        # slow mechanism leaves plastic strain behind a load/unload cycle
        stb = StateBatch.zeros(1)
        path = list(np.linspace(0, 5e-3, 10)) + list(np.linspace(5e-3, 0, 10))[1:]
        for e in path[1:]:
            eps = np.array([e, -0.3 * e, 0.0, 0.0])
            stb, sig, _, _ = integrate_batch(stb, eps[None, :], 60.0, params, want_tangent=False)
        assert stb.p_s[0] > 0.0
        assert np.abs(stb.eps_p_s[0]).max() > 1e-6

    def test_stress_deviator_exact(self, params):
        sp = StressPoint(np.array([[3.0, 1.0, 0.0], [1.0, -2.0, 0.0], [0.0, 0.0, 5.0]]))
        d = sp.sigma_D
        assert np.trace(d) == pytest.approx(0.0, abs=1e-14)
        assert np.array_equal(d, sp.sigma - (np.trace(sp.sigma) / 3.0) * np.eye(3))
