"""Exception hierarchy.

Every error carries a stable ``code`` string so the CLI can report the
failing condition by name.
"""


class ReIDError(Exception):
    code = "ERROR"

    def __str__(self):
        msg = super().__str__()
        return f"{self.code}: {msg}" if msg else self.code


class ShapeMismatch(ReIDError, ValueError):
    code = "SHAPE_MISMATCH"


class BadAxis(ReIDError, ValueError):
    code = "BAD_AXIS"


class NotScalar(ReIDError, ValueError):
    code = "NOT_SCALAR"


class NonFinite(ReIDError, ArithmeticError):
    code = "NON_FINITE"


class BadLabel(ReIDError, ValueError):
    code = "BAD_LABEL"


class NoPositive(ReIDError, ValueError):
    code = "NO_POSITIVE"


class NoNegative(ReIDError, ValueError):
    code = "NO_NEGATIVE"


class NoPairs(ReIDError, ValueError):
    code = "NO_PAIRS"


class ConfigError(ReIDError, ValueError):
    code = "CONFIG_ERROR"


class MissingDir(ReIDError, FileNotFoundError):
    code = "MISSING_DIR"


class BadFilename(ReIDError, ValueError):
    code = "BAD_FILENAME"


class IOWriteError(ReIDError, OSError):
    code = "IO_WRITE"


class TooFewIds(ReIDError, ValueError):
    code = "TOO_FEW_IDS"


class KDegenerate(ReIDError, ValueError):
    code = "K_DEGENERATE"


class DimMismatch(ReIDError, ValueError):
    code = "DIM_MISMATCH"


class ZeroVector(ReIDError, ValueError):
    code = "ZERO_VECTOR"


class EmptyGallery(ReIDError, ValueError):
    code = "EMPTY_GALLERY"


class NoValidQueries(ReIDError, ValueError):
    code = "NO_VALID_QUERIES"


class NoTrueMatch(ReIDError, ValueError):
    code = "NO_TRUE_MATCH"


class CheckpointIOError(ReIDError, OSError):
    code = "IO"


class BadMagic(ReIDError, ValueError):
    code = "BAD_MAGIC"


class VersionUnsupported(ReIDError, ValueError):
    code = "VERSION_UNSUPPORTED"
