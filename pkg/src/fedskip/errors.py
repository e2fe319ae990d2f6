"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError and
InputError and DecodeError -> 3, ProtocolError -> 4.
"""


class FedskipError(Exception):
    """Base class for all package errors."""


class ConfigError(FedskipError):
    """Invalid or inconsistent configuration values."""


class InputError(FedskipError):
    """Bad runtime input (empty batch, token id out of range, ...)."""


class DataError(FedskipError):
    """Missing or malformed dataset files."""


class ProtocolError(FedskipError):
    """Federated protocol violation: keyset mismatch, missing cohort member."""


class DecodeError(FedskipError):
    """Malformed wire frame. Carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset
