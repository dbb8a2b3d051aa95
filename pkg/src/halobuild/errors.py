"""Exception hierarchy shared by every halobuild module."""


class HaloError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class ContractViolation(HaloError, ValueError):
    """Inputs break an operation's preconditions (shapes, ranges, flags)."""


class UnsupportedConfiguration(ContractViolation):
    pass


class CheckpointMismatchError(HaloError, KeyError):
    """A parameter name is missing or a checkpoint file is malformed."""

    def __str__(self):
        return Exception.__str__(self)


class IngestionError(HaloError):
    pass


class TrainingDiverged(HaloError):
    pass


class GradientAuditError(HaloError):
    """Raised when an analytic gradient is non-finite or an audit fails."""
