"""Incremental Newton-Raphson driver with adaptive time stepping.

One :func:`solve_increment` call advances a model from a converged state
to a target time.  Attempts that diverge are retried with dt/4, slowly
converging attempts with dt/2, and accepted steps whose fast plastic
increment exceeds dp_max are retried with dt scaled by dp_max/dp (or the
violation is raised to the caller in single-increment mode, which is how
the coupling layer turns it into a shared-grid restart).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import splu

from .errors import (
    DpExceeded,
    NewtonDivergence,
    NoConvergence,
    OverflowGuard,
    SlowConvergence,
    StepFailure,
)
from .fem import FieldState, Model
from .material import MaterialParams
from .mesh import rect_grid

_ABS_RESIDUAL_FLOOR = 1.0e-9  # [N]


@dataclass(frozen=True)
class SteppingPolicy:
    dp_max: float = 1.0e-4
    newton_tol: float = 1.0e-8
    newton_max_iter: int = 25
    divergence_factor: float = 4.0
    slow_convergence_factor: float = 2.0
    growth_factor: float = 1.5
    fast_steps_before_growth: int = 2
    fast_iters: int = 5               # "fast convergence" = at most this many iterations
    slow_check_after: int = 8
    slow_ratio: float = 0.9

    def __post_init__(self):
        if not self.dp_max > 0:
            raise ValueError("dp_max must be positive")
        for name in ("divergence_factor", "slow_convergence_factor", "growth_factor"):
            if not getattr(self, name) > 1.0:
                raise ValueError(f"{name} must be > 1")


@dataclass(frozen=True)
class StepRecord:
    t_start: float
    t_end: float
    newton_iters: int
    cutbacks: tuple[str, ...]      # causes of rejected attempts before this step
    dp_observed: float
    size_cause: str                # what last set the current dt: initial|dp|cutback

    @property
    def n_cutbacks(self) -> int:
        return len(self.cutbacks)


def newton_step(
    model: Model,
    state: FieldState,
    t_old: float,
    t_new: float,
    policy: SteppingPolicy,
    amplitude,
    dirichlet=None,
    extra_load=None,
):
    """Solve one increment at fixed dt.  Returns (state, f_int, f_ext, iters, dp).

    Raises NewtonDivergence / SlowConvergence for the cutback logic, and
    propagates NoConvergence / OverflowGuard from the material level.
    """
    dt = t_new - t_old
    amp = float(amplitude(t_new))
    f_ext = model.f_ext(amp)
    if extra_load is not None:
        f_ext = f_ext + extra_load(t_new)

    u = state.u.copy()
    u[model.bc_dofs] = model.bc_values * amp
    if model.extra_dofs.size:
        if dirichlet is None:
            raise ValueError(f"{model.name}: interface values required")
        u[model.extra_dofs] = dirichlet(t_new)

    free = model.free_dofs
    prev_norm = np.inf
    rising = 0
    for it in range(policy.newton_max_iter + 1):
        f_int, k, gp_trial, sigma_trial, dp_obs = model.assemble_internal(u, state.gp, dt)
        res = f_ext - f_int
        norm = float(np.linalg.norm(res[free]))
        ref = max(float(np.linalg.norm(f_ext[free])), float(np.linalg.norm(f_int[free])))
        if norm <= max(policy.newton_tol * ref, _ABS_RESIDUAL_FLOOR):
            return FieldState(u, gp_trial, sigma_trial), f_int, f_ext, it, dp_obs
        if not np.isfinite(norm):
            raise NewtonDivergence(f"{model.name}: residual not finite")
        if norm > prev_norm:
            rising += 1
            if rising >= 2:
                raise NewtonDivergence(f"{model.name}: residual rising")
        else:
            rising = 0
        if it >= policy.slow_check_after and norm > policy.slow_ratio * prev_norm:
            raise SlowConvergence(f"{model.name}: slow convergence at iteration {it}")
        if it == policy.newton_max_iter:
            break
        prev_norm = norm
        kff = k[free, :][:, free].tocsc()
        du = splu(kff).solve(res[free])
        u[free] += du
    raise NewtonDivergence(f"{model.name}: no convergence in {policy.newton_max_iter} iterations")


def solve_increment(
    model: Model,
    state: FieldState,
    t_start: float,
    t_target: float,
    policy: SteppingPolicy,
    amplitude,
    dirichlet=None,
    extra_load=None,
    on_dp: str = "subdivide",
    on_accept=None,
    _step_fn=None,
):
    """Advance ``model`` from t_start to t_target under the stepping policy.

    Parameters
    ----------
    amplitude : callable t -> load factor
    dirichlet : callable t -> values for the model's interface dofs
    extra_load : callable t -> extra nodal load vector (corrective load)
    on_dp : "subdivide" inserts internal steps on dp_max violations;
        "raise" propagates :class:`DpExceeded` (single-increment mode)
    on_accept : callback (t, state, f_int, f_ext) after each accepted step

    Returns (final FieldState, list of StepRecord).
    """
    if t_target <= t_start:
        raise ValueError("t_target must exceed t_start")
    step = _step_fn or newton_step
    span = t_target - t_start
    dt_min = span * 1.0e-6
    snap = span * 1.0e-9

    records: list[StepRecord] = []
    t = t_start
    cur = state
    dt = span
    fast_streak = 0
    size_cause = "initial"

    while t < t_target - snap:
        dt = min(dt, t_target - t)
        cutbacks: list[str] = []
        while True:
            t_try = t + dt
            if t_target - t_try < snap:
                t_try = t_target
            try:
                new_state, f_int, f_ext, iters, dp_obs = step(
                    model, cur, t, t_try, policy, amplitude, dirichlet, extra_load
                )
            except (NewtonDivergence, NoConvergence, OverflowGuard):
                dt /= policy.divergence_factor
                cutbacks.append("divergence")
                size_cause = "cutback"
                if dt < dt_min:
                    raise StepFailure(f"{model.name}: dt fell below {dt_min:g} s")
                continue
            except SlowConvergence:
                dt /= policy.slow_convergence_factor
                cutbacks.append("slow_convergence")
                size_cause = "cutback"
                if dt < dt_min:
                    raise StepFailure(f"{model.name}: dt fell below {dt_min:g} s")
                continue
            if dp_obs > policy.dp_max:
                if on_dp == "raise":
                    raise DpExceeded(dp_obs, policy.dp_max, model.name)
                dt *= policy.dp_max / dp_obs
                cutbacks.append("dp_exceeded")
                size_cause = "dp"
                if dt < dt_min:
                    raise StepFailure(f"{model.name}: dt fell below {dt_min:g} s")
                continue
            break
        records.append(StepRecord(t, t_try, iters, tuple(cutbacks), dp_obs, size_cause))
        cur = new_state
        t = t_try
        if on_accept is not None:
            on_accept(t, cur, f_int, f_ext)
        if iters <= policy.fast_iters:
            fast_streak += 1
        else:
            fast_streak = 0
        if fast_streak >= policy.fast_steps_before_growth:
            dt *= policy.growth_factor
            fast_streak = 0
    return cur, records


def tension_test(
    params: MaterialParams,
    strain_rate: float,
    strain_final: float,
    policy: SteppingPolicy,
):
    """Displacement-controlled uniaxial ramp on a single plane-strain element.

    The element has its left edge held in x, the bottom-left corner pinned
    in y and a prescribed ramp on the right edge, leaving the transverse
    direction free.  Returns (curve, n_steps) with curve rows
    (strain, axial stress, cumulated fast plasticity) sampled at accepted
    steps.
    """
    from .fem import LoadCase

    if strain_rate <= 0:
        raise ValueError("strain_rate must be positive")
    mesh = rect_grid(0.0, 0.0, 1.0, 1.0, 1, 1)
    loads = LoadCase(
        dirichlet={
            "left": {"ux": 0.0},
            "corner_bl": {"uy": 0.0},
            "right": {"ux": strain_final},
        }
    )
    model = Model(mesh, params, loads, name="tension")
    t_end = strain_final / strain_rate
    curve = [(0.0, 0.0, 0.0)]

    def record(t, st, f_int, f_ext):
        curve.append((strain_final * t / t_end, float(st.sigma[0, 0]), float(st.gp.p_f[0])))

    state0 = FieldState.virgin(mesh.n_nodes, mesh.n_elements)
    _, records = solve_increment(
        model, state0, 0.0, t_end, policy, amplitude=lambda t: t / t_end, on_accept=record
    )
    return np.array(curve), len(records)
