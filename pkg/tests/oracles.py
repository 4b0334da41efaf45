"""Independent reference implementations used only by the tests.

These deliberately avoid the package's implicit integration path: the
constitutive oracle is an explicit forward-Euler substepping scheme
working on plain 3x3 matrices, and scalar power-law values come from
mpmath at high precision.
"""

from __future__ import annotations

import mpmath
import numpy as np


def norton_power(base: float, n: float) -> float:
    """High-precision scalar evaluation of base**n via exp(n ln base)."""
    if base <= 0.0:
        return 0.0
    with mpmath.workdps(50):
        return float(mpmath.exp(mpmath.mpf(n) * mpmath.log(mpmath.mpf(base))))


def _dev(m: np.ndarray) -> np.ndarray:
    return m - (np.trace(m) / 3.0) * np.eye(3)


def _j2(m: np.ndarray) -> float:
    d = _dev(m)
    return float(np.sqrt(1.5 * np.sum(d * d)))


def forward_euler_point(
    params,
    strain_old: np.ndarray,
    strain_new: np.ndarray,
    dt: float,
    n_sub: int = 10_000,
    state: dict | None = None,
) -> dict:
    """Explicit substepping of the two-potential law along a linear strain path.

    Returns a dict with keys eps_p_f, eps_p_s, X_f (3x3), p_f, p_s, sigma.
    """
    lam = params.E * params.nu / ((1 + params.nu) * (1 - 2 * params.nu))
    mu = params.E / (2 * (1 + params.nu))

    if state is None:
        z = np.zeros((3, 3))
        e_pf, e_ps, x = z.copy(), z.copy(), z.copy()
        p_f = p_s = 0.0
    else:
        e_pf = state["eps_p_f"].copy()
        e_ps = state["eps_p_s"].copy()
        x = state["X_f"].copy()
        p_f, p_s = state["p_f"], state["p_s"]

    strain_old = np.asarray(strain_old, dtype=float)
    strain_new = np.asarray(strain_new, dtype=float)
    h = dt / n_sub if n_sub else 0.0
    for k in range(n_sub):
        eps = strain_old + (strain_new - strain_old) * ((k) / n_sub)
        e_el = eps - e_pf - e_ps
        sigma = lam * np.trace(e_el) * np.eye(3) + 2 * mu * e_el
        s = _dev(sigma)
        xi = s - x
        qf = _j2(xi)
        qs = _j2(s)
        rate_f = max((qf - params.R) / params.K_f, 0.0) ** params.n_f
        rate_s = (qs / params.K_s) ** params.n_s
        if qf > 1e-12:
            n_f_dir = 1.5 * _dev(xi) / qf
        else:
            n_f_dir = np.zeros((3, 3))
        if qs > 1e-12:
            n_s_dir = 1.5 * s / qs
        else:
            n_s_dir = np.zeros((3, 3))
        de_pf = rate_f * n_f_dir * h
        de_ps = rate_s * n_s_dir * h
        e_pf = e_pf + de_pf
        e_ps = e_ps + de_ps
        x = x + (2.0 / 3.0) * params.C * de_pf - params.D * x * rate_f * h
        p_f += rate_f * h
        p_s += rate_s * h

    e_el = strain_new - e_pf - e_ps
    sigma = lam * np.trace(e_el) * np.eye(3) + 2 * mu * e_el
    return {"eps_p_f": e_pf, "eps_p_s": e_ps, "X_f": x, "p_f": p_f, "p_s": p_s, "sigma": sigma}


def quad_body_force(coords: np.ndarray, density_fn, n_gauss: int = 4) -> np.ndarray:
    """Consistent nodal load of a bilinear quad under a body force field.

    ``density_fn(x, y) -> (fx, fy)``.  Uses an n_gauss x n_gauss rule so it
    can serve as a refined-quadrature oracle for the 2x2 assembly.
    """
    pts, wts = np.polynomial.legendre.leggauss(n_gauss)
    out = np.zeros(8)
    for gx, wx in zip(pts, wts):
        for gy, wy in zip(pts, wts):
            n = 0.25 * np.array(
                [(1 - gx) * (1 - gy), (1 + gx) * (1 - gy), (1 + gx) * (1 + gy), (1 - gx) * (1 + gy)]
            )
            dn = 0.25 * np.array(
                [
                    [-(1 - gy), (1 - gy), (1 + gy), -(1 + gy)],
                    [-(1 - gx), -(1 + gx), (1 + gx), (1 - gx)],
                ]
            )
            jac = dn @ coords
            det = np.linalg.det(jac)
            x, y = n @ coords
            fx, fy = density_fn(x, y)
            out[0::2] += wx * wy * det * n * fx
            out[1::2] += wx * wy * det * n * fy
    return out
