"""Exception types shared across the package.

The CLI maps these onto process exit codes, so new failure modes should
subclass one of the families below rather than raising bare Exceptions.
"""


class ConfigError(ValueError):
    """Invalid model/run/spec configuration."""


class DimensionError(ValueError):
    """Array shapes do not satisfy an operation's contract."""


class StateError(RuntimeError):
    """Operation requires state (e.g. a forward cache) that is missing."""


class DataError(Exception):
    """Dataset-level failure: bad schema, unreadable file, malformed input."""


class SchemaError(DataError):
    """Input file does not match the declared column schema."""


class ImageReadError(DataError):
    """Image file missing, unreadable, or corrupt. Carries the path."""

    def __init__(self, path, reason):
        super().__init__(f"cannot read image {path}: {reason}")
        self.path = str(path)


class TrainingError(RuntimeError):
    """Training failed (divergence, NaN loss)."""


class NumericalError(RuntimeError):
    """Numerical failure in a solver."""


class TileError(Exception):
    """Base for tile client failures."""


class PermanentFetchError(TileError):
    """HTTP 4xx: the tile will never be served; not retried."""


class TransientFetchError(TileError):
    """Retries exhausted on 5xx / timeouts."""


class TileContentError(TileError):
    """Response body is not a PNG; never cached."""


class PatchError(TileError):
    """A stitched patch could not be assembled. Lists the missing tiles."""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"unfetchable tiles: {', '.join(str(t) for t in self.missing)}")
