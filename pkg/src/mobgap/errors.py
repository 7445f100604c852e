"""Exception hierarchy shared by every stage of the pipeline."""


class MobgapError(Exception):
    """Base class; ``stage`` is filled in by the CLI when it is known."""

    stage: str | None = None


class ValidationError(MobgapError, ValueError):
    """Input does not satisfy a documented precondition."""


class InfeasibleError(ValidationError):
    """The request cannot be satisfied by the data (e.g. k > distinct points)."""


class LoadError(ValidationError):
    """A table or survey file failed validation while loading."""


class DuplicateKeyError(LoadError):
    pass


class NonPositiveCutoffError(LoadError):
    pass


class MonotonicityError(LoadError):
    pass


class ClassificationError(ValidationError):
    """A household could not be resolved against a threshold table."""


class ComputationError(MobgapError, RuntimeError):
    """An algorithm reached a state it should not be able to reach."""


class EmptyClusterError(ComputationError):
    pass
