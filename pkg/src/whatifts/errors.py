"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: usage errors exit 2 (argparse
default), ``DataError`` exits 3, ``CheckpointError`` exits 4.
"""


class WhatiftsError(Exception):
    """Base class for package-specific failures."""


class DataError(WhatiftsError):
    """Dataset files missing, malformed, or violating schema invariants."""


class SchemaError(DataError):
    """A record failed schema validation; message carries line/field context."""


class CheckpointError(WhatiftsError):
    """Checkpoint archive missing, corrupt, or incompatible."""


class GridViolationError(ValueError):
    """A diffusion transition was requested between steps not on the grid."""
