"""Exception types shared across the package."""


class ConceptMapError(Exception):
    """Base class for all library errors."""


class ConfigError(ConceptMapError, ValueError):
    """Invalid configuration value (bad geometry, ratio outside [0,1], ...)."""


class DimensionError(ConceptMapError, ValueError):
    """Tensor shapes incompatible for the requested operation."""


class NumericError(ConceptMapError, ArithmeticError):
    """NaN or otherwise out-of-domain numeric input."""


class ContractError(ConceptMapError, ValueError):
    """A call-site precondition was violated (missing grad, duplicate edit, ...)."""


class IngestError(ConceptMapError, ValueError):
    """Dataset folder or CSV could not be ingested."""


class CapacityError(ConceptMapError, RuntimeError):
    """Prototype resampling could not satisfy the separation constraints."""


class ValidationError(ConceptMapError, ValueError):
    """Loaded data violates a declared invariant."""


class CheckpointVersionError(ConceptMapError, ValueError):
    """Checkpoint file format version is not supported."""


class CheckpointIntegrityError(ConceptMapError, ValueError):
    """Checkpoint file is truncated or fails its checksum."""
