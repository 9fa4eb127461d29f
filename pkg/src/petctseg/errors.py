"""Exception taxonomy shared across the package."""


class PetctsegError(Exception):
    """Base class for all package errors."""


class DimensionError(PetctsegError):
    """Operand shapes are incompatible."""


class ConfigurationError(PetctsegError):
    """A configuration value violates its preconditions."""


class UsageError(PetctsegError):
    """An operation was called in a way its contract forbids."""


class VolumeFormatError(PetctsegError):
    """Base class for volume-bundle file problems."""


class HeaderError(VolumeFormatError):
    """Volume header file is missing required fields or holds invalid values."""


class PayloadLengthError(VolumeFormatError):
    """Raw payload byte count disagrees with the header dims."""


class CheckpointError(PetctsegError):
    """Base class for checkpoint file problems."""


class CheckpointIntegrityError(CheckpointError):
    """Checkpoint manifest and payload disagree."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class UndefinedMetricError(PetctsegError):
    """A distance metric was requested for an empty mask.

    ``empty_side`` names which operand(s) had no foreground: "pred", "true"
    or "both".
    """

    def __init__(self, message, empty_side):
        super().__init__(message)
        self.empty_side = empty_side


class TrainingDivergedError(PetctsegError):
    """Training produced a non-finite loss.

    Carries the epoch and case id that triggered the abort.
    """

    def __init__(self, message, epoch, case_id):
        super().__init__(message)
        self.epoch = epoch
        self.case_id = case_id
