"""Two-potential elastoviscoplastic constitutive law and its point integrator.

The model combines linear isotropic elasticity with two Norton-type
viscoplastic mechanisms:

* a *fast* mechanism with a von Mises threshold shifted by an
  Armstrong-Frederick backstress,
* a *slow* mechanism with no threshold acting on the stress deviator.

Integration is fully implicit (backward Euler) with a damped Newton
solve on the coupled (deviatoric stress, backstress, dp_fast, dp_slow)
system, vectorized over an arbitrary batch of material points.  The
consistent tangent is obtained by implicit differentiation of the
converged residual system, so it is the exact linearization of the
discrete update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoConvergence, OverflowGuard
from .tensors import DEV, W, contract, deviator, enforce_traceless, from_matrix, j2, matrix4_to_tensor4, to_matrix

# Norton bases are capped before exponentiation; beyond the cap the state is
# considered runaway and the caller must cut the time increment.
NORTON_BASE_CAP = 10.0

# local Newton controls (point-level solve must be far tighter than the
# structural tolerance)
_NEWTON_TOL = 1.0e-10
_NEWTON_MAX_ITER = 50


@dataclass(frozen=True)
class MaterialParams:
    """Parameters of the elastoviscoplastic law (MPa / seconds units)."""

    E: float
    nu: float
    C: float
    D: float
    R: float
    n_f: float
    K_f: float
    n_s: float
    K_s: float

    def __post_init__(self):
        if not self.E > 0:
            raise ValueError("E must be positive")
        if not -1.0 < self.nu < 0.5:
            raise ValueError("nu must lie in (-1, 0.5)")
        if self.C < 0 or self.D < 0 or self.R < 0:
            raise ValueError("C, D, R must be non-negative")
        if self.n_f < 1 or self.n_s < 1:
            raise ValueError("Norton exponents must be >= 1")
        if not (self.K_f > 0 and self.K_s > 0):
            raise ValueError("Norton drags must be positive")

    @property
    def mu(self) -> float:
        return self.E / (2.0 * (1.0 + self.nu))

    @property
    def lam(self) -> float:
        return self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))

    @property
    def bulk(self) -> float:
        return self.E / (3.0 * (1.0 - 2.0 * self.nu))

    @classmethod
    def from_mapping(cls, data) -> "MaterialParams":
        keys = ("E", "nu", "C", "D", "R", "n_f", "K_f", "n_s", "K_s")
        missing = [k for k in keys if k not in data]
        if missing:
            raise ValueError(f"missing material keys: {missing}")
        return cls(**{k: float(data[k]) for k in keys})


@dataclass
class MaterialState:
    """Internal variables at one material point (3x3 symmetric tensors)."""

    eps_p_f: np.ndarray
    eps_p_s: np.ndarray
    X_f: np.ndarray
    p_f: float = 0.0
    p_s: float = 0.0

    @classmethod
    def virgin(cls) -> "MaterialState":
        z = np.zeros((3, 3))
        return cls(z.copy(), z.copy(), z.copy(), 0.0, 0.0)

    def copy(self) -> "MaterialState":
        return MaterialState(
            self.eps_p_f.copy(), self.eps_p_s.copy(), self.X_f.copy(), self.p_f, self.p_s
        )


@dataclass
class StressPoint:
    """Cauchy stress with its deviator derived exactly on access."""

    sigma: np.ndarray

    @property
    def sigma_D(self) -> np.ndarray:
        return self.sigma - (np.trace(self.sigma) / 3.0) * np.eye(3)


@dataclass
class StateBatch:
    """Vectorized internal variables for n material points.

    Tensors use the 4-vector plane-strain storage of :mod:`glofem.tensors`.
    """

    eps_p_f: np.ndarray
    eps_p_s: np.ndarray
    X_f: np.ndarray
    p_f: np.ndarray
    p_s: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "StateBatch":
        return cls(
            np.zeros((n, 4)), np.zeros((n, 4)), np.zeros((n, 4)), np.zeros(n), np.zeros(n)
        )

    @property
    def n(self) -> int:
        return self.p_f.shape[0]

    def copy(self) -> "StateBatch":
        return StateBatch(
            self.eps_p_f.copy(),
            self.eps_p_s.copy(),
            self.X_f.copy(),
            self.p_f.copy(),
            self.p_s.copy(),
        )


def _norton(base: np.ndarray, n: float):
    """Capped power law value and derivative wrt the base.

    Below zero the Macaulay bracket gives zero; beyond the cap the law is
    extended linearly so Newton iterates stay finite while the residual
    keeps pushing back.
    """
    b = np.maximum(base, 0.0)
    capped = np.minimum(b, NORTON_BASE_CAP)
    val = capped**n
    der = np.where(b > 0.0, n * capped ** (n - 1.0), 0.0)
    over = b > NORTON_BASE_CAP
    if np.any(over):
        val = np.where(over, NORTON_BASE_CAP**n + n * NORTON_BASE_CAP ** (n - 1.0) * (b - NORTON_BASE_CAP), val)
    return val, der


def yield_function(sigma, X_f: np.ndarray, params: MaterialParams) -> float:
    """f = J2(dev(sigma) - X_f) - R.  Total function, no side effects."""
    sig = sigma.sigma if isinstance(sigma, StressPoint) else np.asarray(sigma)
    s4 = deviator(from_matrix(sig))
    x4 = from_matrix(np.asarray(X_f))
    return float(j2(s4 - x4) - params.R)


def flow_rates(sigma, X_f: np.ndarray, params: MaterialParams) -> tuple[float, float]:
    """Norton flow rates (fast, slow) at the given stress and backstress.

    Raises :class:`OverflowGuard` when either base exceeds the cap, which
    indicates runaway stress and triggers a solver cutback upstream.
    """
    sig = sigma.sigma if isinstance(sigma, StressPoint) else np.asarray(sigma)
    s4 = deviator(from_matrix(sig))
    x4 = from_matrix(np.asarray(X_f))
    base_f = (j2(s4 - x4) - params.R) / params.K_f
    base_s = j2(s4) / params.K_s
    if base_f > NORTON_BASE_CAP or base_s > NORTON_BASE_CAP:
        raise OverflowGuard(
            f"Norton base beyond cap ({base_f:.2f}, {base_s:.2f} > {NORTON_BASE_CAP})"
        )
    p_f_rate = max(base_f, 0.0) ** params.n_f
    p_s_rate = max(base_s, 0.0) ** params.n_s
    return float(p_f_rate), float(p_s_rate)


def elastic_matrix(params: MaterialParams) -> np.ndarray:
    """Isotropic Hooke tensor in 4-vector storage (tensorial shear)."""
    lam, mu = params.lam, params.mu
    c = np.zeros((4, 4))
    c[:3, :3] = lam
    c[0, 0] = c[1, 1] = c[2, 2] = lam + 2.0 * mu
    c[3, 3] = 2.0 * mu
    return c


def elastic_tangent(params: MaterialParams) -> np.ndarray:
    """Full 4th-order isotropic Hooke tensor with exact symmetries."""
    return matrix4_to_tensor4(elastic_matrix(params))


def _stress_from_state(eps4: np.ndarray, e_p_f: np.ndarray, e_p_s: np.ndarray, params: MaterialParams) -> np.ndarray:
    """sigma = K tr(eps) I + 2 mu (dev(eps) - eps_p_f - eps_p_s)."""
    vol = (params.bulk * (eps4[..., 0] + eps4[..., 1] + eps4[..., 2]))[..., None]
    sig = 2.0 * params.mu * (deviator(eps4) - e_p_f - e_p_s)
    sig[..., :3] += vol
    return sig


def integrate_batch(
    states: StateBatch,
    eps_new: np.ndarray,
    dt: float,
    params: MaterialParams,
    want_tangent: bool = True,
):
    """Backward-Euler update of a batch of material points.

    Parameters
    ----------
    states : converged internal variables at the previous time
    eps_new : (n, 4) total strain at the end of the increment
    dt : time increment (>= 0); dt == 0 reduces to the elastic update
    params : material parameters

    Returns
    -------
    (new_states, sigma (n,4), tangent (n,4,4) or None, dp_f (n,))

    Raises
    ------
    NoConvergence
        with the index of the worst point if the local Newton stalls.
    OverflowGuard
        if the converged state sits beyond the Norton base cap.
    """
    mu = params.mu
    n = states.n
    if dt < 0.0:
        raise ValueError("dt must be non-negative")

    e_dev = deviator(eps_new)
    s_tr = 2.0 * mu * (e_dev - states.eps_p_f - states.eps_p_s)
    x_old = states.X_f

    # unknowns per point: s (4), X (4), dp_f, dp_s
    s = s_tr.copy()
    x = x_old.copy()
    dpf = np.zeros(n)
    dps = np.zeros(n)

    def chunk_residual(s, x, dpf, dps, s_tr, x_old, tol):
        xi = s - x
        qf = np.sqrt(np.maximum(1.5 * contract(xi, xi), 0.0))
        qs = np.sqrt(np.maximum(1.5 * contract(s, s), 0.0))
        qf_s = np.maximum(qf, 1.0e-30)
        qs_s = np.maximum(qs, 1.0e-30)
        uf = xi / qf_s[:, None]
        us = s / qs_s[:, None]
        phif, dphif = _norton((qf - params.R) / params.K_f, params.n_f)
        phis, dphis = _norton(qs / params.K_s, params.n_s)
        r = np.empty(s.shape[:1] + (10,))
        r[:, 0:4] = (s - s_tr + 3.0 * mu * (dpf[:, None] * uf + dps[:, None] * us)) / (2.0 * mu)
        r[:, 4:8] = (x * (1.0 + params.D * dpf)[:, None] - x_old - params.C * dpf[:, None] * uf) / (2.0 * mu)
        r[:, 8] = dpf - dt * phif
        r[:, 9] = dps - dt * phis
        merit = np.max(np.abs(r) / tol, axis=1)
        aux = np.stack([qf_s, qs_s, phif, dphif, phis, dphis], axis=1)
        return r, merit, aux, uf, us

    # Flow-equation rows get a tolerance tied to the trial flow magnitude, so
    # small-but-real plastic increments are resolved instead of being dropped
    # at the elastic predictor (matters when many tiny substeps accumulate).
    tol = np.full((n, 10), _NEWTON_TOL)
    r, merit, aux, uf_all, us_all = chunk_residual(s, x, dpf, dps, s_tr, x_old, tol)
    tol[:, 8] = np.minimum(_NEWTON_TOL, np.maximum(1.0e-6 * dt * aux[:, 2], 1.0e-18))
    tol[:, 9] = np.minimum(_NEWTON_TOL, np.maximum(1.0e-6 * dt * aux[:, 4], 1.0e-18))
    merit = np.max(np.abs(r) / tol, axis=1)
    active = merit > 1.0
    ever_active = active.copy()

    eye4 = np.eye(4)
    it = 0
    while np.any(active) and it < _NEWTON_MAX_ITER:
        it += 1
        idx = np.nonzero(active)[0]
        sa, xa, fa, la = s[idx], x[idx], dpf[idx], dps[idx]
        qf_s, qs_s, phif, dphif, phis, dphis = aux[idx].T
        uf, us = uf_all[idx], us_all[idx]
        tr_a, xo_a, tol_a = s_tr[idx], x_old[idx], tol[idx]
        m = idx.size

        # projector blocks scaled by their dp coefficients (finite at q -> 0)
        def scaled_proj(u, q, coef):
            # coef/q * (I - 1.5 u (W u)^T)
            c = (coef / q)[:, None, None]
            return c * (eye4[None, :, :] - 1.5 * u[:, :, None] * (W * u)[:, None, :])

        jac = np.zeros((m, 10, 10))
        pf_term = scaled_proj(uf, qf_s, 3.0 * mu * fa)
        ps_term = scaled_proj(us, qs_s, 3.0 * mu * la)
        jac[:, 0:4, 0:4] = (eye4[None] + pf_term + ps_term) / (2.0 * mu)
        jac[:, 0:4, 4:8] = -pf_term / (2.0 * mu)
        jac[:, 0:4, 8] = 1.5 * uf
        jac[:, 0:4, 9] = 1.5 * us

        cx_term = scaled_proj(uf, qf_s, params.C * fa)
        jac[:, 4:8, 0:4] = -cx_term / (2.0 * mu)
        jac[:, 4:8, 4:8] = ((1.0 + params.D * fa)[:, None, None] * eye4[None] + cx_term) / (2.0 * mu)
        jac[:, 4:8, 8] = (params.D * xa - params.C * uf) / (2.0 * mu)

        gqf = 1.5 * (W * uf)  # d qf / d s  (and -d qf / d X)
        gqs = 1.5 * (W * us)
        jac[:, 8, 0:4] = -(dt * dphif / params.K_f)[:, None] * gqf
        jac[:, 8, 4:8] = (dt * dphif / params.K_f)[:, None] * gqf
        jac[:, 8, 8] = 1.0
        jac[:, 9, 0:4] = -(dt * dphis / params.K_s)[:, None] * gqs
        jac[:, 9, 9] = 1.0

        try:
            step = np.linalg.solve(jac, -r[idx][:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            raise NoConvergence("singular local Jacobian", element=int(idx[0]))

        # damped update with non-negative plastic increments
        alpha = np.ones(m)
        old_merit = merit[idx]
        for _ in range(5):
            s_t = sa + alpha[:, None] * step[:, 0:4]
            x_t = xa + alpha[:, None] * step[:, 4:8]
            f_t = np.maximum(fa + alpha * step[:, 8], 0.0)
            l_t = np.maximum(la + alpha * step[:, 9], 0.0)
            r_t, merit_t, aux_t, uf_t, us_t = chunk_residual(s_t, x_t, f_t, l_t, tr_a, xo_a, tol_a)
            worse = merit_t > old_merit
            if not np.any(worse & (merit_t > 1.0)):
                break
            alpha = np.where(worse, 0.5 * alpha, alpha)
        s[idx], x[idx], dpf[idx], dps[idx] = s_t, x_t, f_t, l_t
        r[idx], merit[idx], aux[idx] = r_t, merit_t, aux_t
        uf_all[idx], us_all[idx] = uf_t, us_t
        active = merit > 1.0

    if np.any(active):
        worst = int(np.argmax(merit))
        raise NoConvergence(
            f"material Newton stalled at {merit[worst]:.3e}x tolerance after {it} iterations",
            element=worst,
        )

    qf_s, qs_s, phif, dphif, phis, dphis = aux.T
    uf, us = uf_all, us_all
    base_f = (qf_s - params.R) / params.K_f
    base_s = qs_s / params.K_s
    if np.any(base_f > NORTON_BASE_CAP) or np.any(base_s > NORTON_BASE_CAP):
        raise OverflowGuard("converged Norton base beyond cap; runaway stress")

    new = StateBatch(
        enforce_traceless(states.eps_p_f + 1.5 * dpf[:, None] * uf),
        enforce_traceless(states.eps_p_s + 1.5 * dps[:, None] * us),
        enforce_traceless(x),
        states.p_f + dpf,
        states.p_s + dps,
    )
    sigma = _stress_from_state(eps_new, new.eps_p_f, new.eps_p_s, params)

    tangent = None
    if want_tangent:
        # points that never iterated return exactly the elastic update in a
        # whole neighbourhood, so their consistent tangent is the Hooke matrix;
        # implicit differentiation J dy = [DEV; 0; 0] d(eps) for the rest
        tangent = np.broadcast_to(elastic_matrix(params), (n, 4, 4)).copy()
        act = np.nonzero(ever_active)[0]
        if act.size:
            jac = _jacobian_full(
                s[act], x[act], dpf[act], dps[act],
                (qf_s[act], qs_s[act], uf[act], us[act], dphif[act], dphis[act]),
                dt, params,
            )
            rhs = np.zeros((act.size, 10, 4))
            rhs[:, 0:4, :] = DEV[None, :, :]
            dy = np.linalg.solve(jac, rhs)
            tan_act = dy[:, 0:4, :]
            tan_act[:, :3, :3] += params.bulk
            tangent[act] = tan_act
    return new, sigma, tangent, dpf


def _jacobian_full(s, x, dpf, dps, aux, dt, params: MaterialParams):
    """Assemble the converged-state Jacobian for the whole batch."""
    mu = params.mu
    n = s.shape[0]
    qf_s, qs_s, uf, us, dphif, dphis = aux
    eye4 = np.eye(4)

    def scaled_proj(u, q, coef):
        c = (coef / q)[:, None, None]
        return c * (eye4[None, :, :] - 1.5 * u[:, :, None] * (W * u)[:, None, :])

    jac = np.zeros((n, 10, 10))
    pf_term = scaled_proj(uf, qf_s, 3.0 * mu * dpf)
    ps_term = scaled_proj(us, qs_s, 3.0 * mu * dps)
    jac[:, 0:4, 0:4] = (eye4[None] + pf_term + ps_term) / (2.0 * mu)
    jac[:, 0:4, 4:8] = -pf_term / (2.0 * mu)
    jac[:, 0:4, 8] = 1.5 * uf
    jac[:, 0:4, 9] = 1.5 * us
    cx_term = scaled_proj(uf, qf_s, params.C * dpf)
    jac[:, 4:8, 0:4] = -cx_term / (2.0 * mu)
    jac[:, 4:8, 4:8] = ((1.0 + params.D * dpf)[:, None, None] * eye4[None] + cx_term) / (2.0 * mu)
    jac[:, 4:8, 8] = (params.D * x - params.C * uf) / (2.0 * mu)
    gqf = 1.5 * (W * uf)
    gqs = 1.5 * (W * us)
    jac[:, 8, 0:4] = -(dt * dphif / params.K_f)[:, None] * gqf
    jac[:, 8, 4:8] = (dt * dphif / params.K_f)[:, None] * gqf
    jac[:, 8, 8] = 1.0
    jac[:, 9, 0:4] = -(dt * dphis / params.K_s)[:, None] * gqs
    jac[:, 9, 9] = 1.0
    return jac


def integrate_point(
    state: MaterialState,
    strain_old: np.ndarray,
    strain_new: np.ndarray,
    dt: float,
    params: MaterialParams,
):
    """Point-level backward-Euler update.

    ``strain_old`` is accepted for interface symmetry with explicit
    integrators; the implicit update only needs the end-of-step strain.

    Returns (state_new, StressPoint, tangent as a (3,3,3,3) array, dp_f).
    """
    del strain_old
    batch = StateBatch(
        from_matrix(state.eps_p_f)[None, :],
        from_matrix(state.eps_p_s)[None, :],
        from_matrix(state.X_f)[None, :],
        np.array([state.p_f]),
        np.array([state.p_s]),
    )
    eps4 = from_matrix(np.asarray(strain_new))[None, :]
    new, sig, tan, dpf = integrate_batch(batch, eps4, dt, params)
    out = MaterialState(
        to_matrix(new.eps_p_f[0]),
        to_matrix(new.eps_p_s[0]),
        to_matrix(new.X_f[0]),
        float(new.p_f[0]),
        float(new.p_s[0]),
    )
    return out, StressPoint(to_matrix(sig[0])), matrix4_to_tensor4(tan[0]), float(dpf[0])
