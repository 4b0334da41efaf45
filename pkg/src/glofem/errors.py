"""Exception types shared across the toolkit."""

from __future__ import annotations


class GlofemError(Exception):
    """Base class for all toolkit errors."""


class OverflowGuard(GlofemError):
    """A Norton base exceeded the cap; the stress state is running away.

    Callers treat this as a recoverable signal and cut the time increment.
    """


class NoConvergence(GlofemError):
    """Local integration Newton did not converge; signals an upstream cutback."""

    def __init__(self, msg: str, element: int | None = None):
        super().__init__(msg)
        self.element = element


class MeshError(GlofemError):
    """Invalid mesh data (bad connectivity, negative Jacobian, ...)."""


class UnknownSet(GlofemError):
    """A load or boundary condition references a node/side set that does not exist."""


class ProjectionFailure(GlofemError):
    """A local interface node could not be projected onto the global interface."""


class StepFailure(GlofemError):
    """The adaptive time stepper ran out of room (dt fell below its floor)."""


class MaxIterations(GlofemError):
    """The global/local fixed point exceeded its iteration cap without converging."""


class ScenarioError(GlofemError):
    """Scenario file failed to parse or validate."""


class IncompatibleRuns(GlofemError):
    """Two run reports cannot be compared (different cycles or meshes)."""


class DpExceeded(GlofemError):
    """Internal signal: a solve observed dp above the threshold in single-increment mode.

    Carries what was observed so the caller can shrink the increment
    proportionally.
    """

    def __init__(self, dp_observed: float, dp_max: float, model: str = ""):
        super().__init__(f"dp={dp_observed:.3e} exceeds dp_max={dp_max:.3e} ({model})")
        self.dp_observed = dp_observed
        self.dp_max = dp_max
        self.model = model


class NewtonDivergence(GlofemError):
    """Internal signal: the structural Newton loop diverged on an attempt."""


class SlowConvergence(GlofemError):
    """Internal signal: the structural Newton loop is converging too slowly."""
