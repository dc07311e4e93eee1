"""
Error Hierarchy
===============
Every failure raised by the engine derives from ``PeftLabError`` and carries
the process exit code the CLI reports for it.

Exit codes:
- 2: configuration problems (bad YAML keys, unknown hyperparameters,
  constraint violations, duplicate method registration)
- 3: data problems (missing columns, malformed JSONL, length overflow)
- 4: runtime problems (shape mismatch, state/capability/compatibility errors)
"""


class PeftLabError(Exception):
    """Base class for all engine errors."""

    exit_code: int = 4


class ConfigError(PeftLabError):
    """Raised for invalid configuration, hyperparameters or specs."""

    exit_code = 2


class RegistrationError(ConfigError):
    """Raised when a discovered method collides with a registered peft_type."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class DataError(PeftLabError):
    """Raised for malformed records, missing columns or unknown labels."""

    exit_code = 3


class LengthError(DataError):
    """Raised when a sequence does not fit into the model context."""


class ShapeError(PeftLabError):
    """Raised when tensor extents are incompatible for an operation."""


class StateError(PeftLabError):
    """Raised when an operation is invalid for the current model state."""


class CapabilityError(PeftLabError):
    """Raised when a method does not support the requested lifecycle step."""


class CompatibilityError(PeftLabError):
    """Raised when a checkpoint does not match the target model."""


class RegistryError(PeftLabError):
    """Raised when a peft_type is not present in the registry."""


class DiscoveryIOError(PeftLabError):
    """Raised when the plugin directory cannot be read."""


class TrainingError(PeftLabError):
    """Raised when a training run diverges or violates frozen-base invariance."""
