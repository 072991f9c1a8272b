"""Exception types shared across the package.

The CLI maps these onto stable exit codes: DataError -> 2,
CalibrationError -> 3 (usage errors from argument parsing -> 1).
"""


class DataError(ValueError):
    """Malformed or inconsistent input data (files, manifests, masks)."""


class CalibrationError(RuntimeError):
    """A threshold cannot be calibrated (e.g. a group has no impostor pairs)."""
