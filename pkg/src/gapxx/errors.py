"""Exception taxonomy and process exit codes shared across the toolkit."""


class GapxxError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class UsageError(GapxxError):
    """Bad flag combinations or invalid request parameters."""

    exit_code = 2


class InvalidInputError(GapxxError):
    """Malformed tensor input: wrong shape, non-finite entries, label out of range."""

    exit_code = 2


class ConfigurationError(UsageError):
    """Invalid configuration, e.g. an architecture/dataset pairing the victim matrix does not define."""


class UnsupportedBudgetError(UsageError):
    """A budget whose norm family the requested operation cannot handle."""


class InvalidBudgetError(UsageError):
    """A budget violating its own invariants (negative epsilon, k out of range)."""


class UnmappedBudgetError(GapxxError):
    """A budget with no configured total-variation table entry; never interpolated silently."""

    exit_code = 2


class IngestionError(GapxxError):
    """Missing or corrupt dataset source files."""

    exit_code = 3


class OutputExistsError(GapxxError):
    """Output directory collision without --force."""

    exit_code = 6


class CheckpointError(GapxxError):
    """Unreadable, corrupt, or version-mismatched checkpoint file."""

    exit_code = 3


class CheckpointTypeError(CheckpointError):
    """Checkpoint exists but carries the wrong type tag (victim vs generator)."""


class TrainingFailureError(GapxxError):
    """Training diverged (NaN loss); carries the path of the last good checkpoint if any."""

    exit_code = 4

    def __init__(self, message, last_good_checkpoint=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


class InvariantViolationError(GapxxError):
    """A run-time contract was broken, e.g. victim parameters drifted during attacker training."""

    exit_code = 5


class SamplerContractError(InvariantViolationError):
    """A sampled attack target equals the victim's clean prediction."""


class ImpossibleAttackError(UsageError):
    """Attack requested against a label space where no alternative class exists."""


class WrongTargetError(UsageError):
    """A single-target GAP model was asked for a target it was not trained for."""


class IncompatibilityError(UsageError):
    """Attacker and victim disagree on class count or input shape."""
