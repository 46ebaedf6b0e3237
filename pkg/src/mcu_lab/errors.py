"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument is outside the domain an operation accepts."""


class DegenerateError(DomainError):
    """Every sample was excluded, so the requested statistic is undefined."""


class ResourceError(RuntimeError):
    """A size guard was exceeded."""


class TrainingError(RuntimeError):
    """Optimisation produced a non-finite loss or failed its sanity gate."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class AttackError(TrainingError):
    """The relearning attack diverged."""
