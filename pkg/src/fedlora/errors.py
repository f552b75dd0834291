"""Exception hierarchy for fedlora.

Every error raised by the library derives from FedLoraError so callers can
catch library failures without swallowing programming errors.
"""


class FedLoraError(Exception):
    """Base class for all fedlora errors."""


class ShapeMismatch(FedLoraError):
    """Operands have incompatible dimensions."""


class ZeroVector(FedLoraError):
    """A vector with norm below the zero tolerance cannot be normalized."""


class NotUnit(FedLoraError):
    """An argument required to be a unit vector is not."""


class RankTooLarge(FedLoraError):
    """Requested rank exceeds what the matrix dimensions allow."""


class BadSpec(FedLoraError):
    """An initialization or aggregation spec is inconsistent."""


class BadAngle(FedLoraError):
    """Initial angle distance outside the open interval (0, 1)."""


class BadRange(FedLoraError):
    """Scalar argument outside its documented range."""


class BadPartition(FedLoraError):
    """A dataset split request cannot produce a valid partition."""


class PopulationModeError(FedLoraError):
    """Operation requires a finite-sample task but got population mode."""


class FiniteSampleModeError(FedLoraError):
    """Operation requires a population task but got finite-sample mode."""


class DegenerateDesign(FedLoraError):
    """The design matrix makes the local least-squares problem singular."""


class FrozenFactorMismatch(FedLoraError):
    """A factor that should be identical across clients differs; protocol bug."""


class StepTooLarge(FedLoraError):
    """Learning rate violates the stability precondition."""


class DivergenceDetected(FedLoraError):
    """Training loss blew past the divergence threshold."""


class SchemaMismatch(FedLoraError):
    """Traces or report rows do not share a schema."""


class IdxFormatError(FedLoraError):
    """An IDX image/label file has a bad magic number or truncated payload."""


class ConfigError(FedLoraError):
    """Base class for experiment-config problems (CLI exit code 1)."""


class ParseError(ConfigError):
    """Config text is syntactically malformed; message carries the line number."""


class ValidationError(ConfigError):
    """Config parsed but a field value is invalid; message names the field."""
