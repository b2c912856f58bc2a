"""
Error hierarchy shared by every service.

Each error carries the exit code main.py returns when it escapes a subcommand.
"""


class MMAError(Exception):
    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class UsageError(MMAError):
    """Bad command line: unknown flag, missing argument."""


class ConfigError(MMAError):
    """A configuration value or combination that cannot be honoured."""


class DimensionError(MMAError):
    """Operand shapes do not fit the operation."""


class ContractError(MMAError):
    """A precondition of an operation was violated by the caller."""


class NumericDomainError(MMAError):
    """NaN or infinite values where finite ones are required."""


class TapeError(MMAError):
    """Backward pass requested on a missing, detached or consumed tape."""


class TrainingDivergedError(MMAError):
    """Loss became non-finite during training."""


class DataFormatError(MMAError):
    exit_code = 2


class CheckpointError(DataFormatError):
    """Corrupt checkpoint, or a checkpoint that does not match its config."""


class VerificationFailure(MMAError):
    exit_code = 3
