"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A model or quantizer configuration violates a structural constraint."""


class ShapeMismatchError(ValueError):
    """Operand shapes or group sizes are incompatible."""


class NonFiniteError(ValueError):
    """A NaN or infinity reached an operation that requires finite input."""


class ContextOverflowError(RuntimeError):
    """A token position would exceed the model's maximum sequence length."""

    def __init__(self, message: str, position: int):
        super().__init__(message)
        self.position = position


class ProtocolError(RuntimeError):
    """Malformed frame or unexpected message on a worker connection."""


class BlobIntegrityError(ProtocolError):
    """A serialized cache blob failed checksum or structural validation."""
