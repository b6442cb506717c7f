"""Exception hierarchy shared by every stage.

Each fatal category maps onto one CLI exit code.
"""


class NdrError(Exception):
    exit_code = 1


class ConfigError(NdrError):
    """Malformed or out-of-range configuration. Fatal at startup."""

    exit_code = 2


class PathResolutionError(ConfigError):
    """A path could not be resolved (missing parent, bad bytes, too long)."""


class ModelInvariantError(ConfigError):
    """A forest model violates a structural invariant."""


class SecurityViolation(NdrError):
    exit_code = 3

    def __init__(self, message: str):
        super().__init__(f"SECURITY VIOLATION -- {message}")


class IntegrityError(NdrError):
    exit_code = 4


class SignatureError(IntegrityError):
    """Detached model signature missing or invalid."""


class AuthenticationError(IntegrityError):
    """AEAD frame failed authentication. Never carries partial plaintext."""


class NonceExhausted(NdrError):
    pass
