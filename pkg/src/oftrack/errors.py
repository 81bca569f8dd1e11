"""Exception hierarchy shared across the package."""


class OftrackError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(OftrackError):
    """Malformed or inconsistent scenario configuration."""

    exit_code = 5


class NotSchurError(OftrackError):
    """A matrix required to be Schur stable is not."""

    exit_code = 3


class InstabilityError(OftrackError):
    """A simulated loop diverged."""

    exit_code = 3


class RankConditionError(OftrackError):
    """Collected data are not rich enough to identify the kernels."""

    exit_code = 2


class ConvergenceError(OftrackError):
    """An iterative procedure hit its iteration cap."""

    exit_code = 4


class PolicyUpdateError(OftrackError):
    """The learned R + L2 block is not positive definite."""

    exit_code = 4


class PlacementError(OftrackError):
    """Observer eigenvalue placement failed."""

    exit_code = 6


class StabilizabilityError(OftrackError):
    """No stabilizing gain could be constructed."""

    exit_code = 6
