"""
Error types shared by every stage.
Each carries the process exit code the CLI reports for it.
"""


class GestureError(Exception):
    exit_code = 1


class ConfigError(GestureError):
    """Invalid experiment configuration or missing prerequisite artefact."""
    exit_code = 2


class DataError(GestureError):
    exit_code = 3


class InputError(DataError):
    """Unreadable, empty or otherwise unusable input."""


class FormatError(DataError):
    """Input that is readable but violates its documented format."""


class ContractError(GestureError):
    """Shapes, lengths or identifiers that do not match between components."""
    exit_code = 4
