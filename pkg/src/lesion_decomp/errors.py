"""Exception types shared across the package.

Every error carries a short machine-readable ``code`` so callers (and the
CLI) can branch on the failure kind without parsing messages.
"""


class LesionDecompError(Exception):
    code = "error"

    def __init__(self, message: str = ""):
        super().__init__(f"{self.code}: {message}" if message else self.code)


class InvalidSpecError(LesionDecompError, ValueError):
    code = "invalid-spec"


class RoiTooSmallError(LesionDecompError):
    code = "roi-too-small"


class DegenerateStatsError(LesionDecompError):
    code = "degenerate-stats"


class EmptyCorpusError(LesionDecompError):
    code = "empty-split"


class BadShapeError(LesionDecompError, ValueError):
    code = "bad-shape"


class DivergedError(LesionDecompError):
    code = "diverged"


class ArchMismatchError(LesionDecompError):
    code = "arch-mismatch"


class CorruptCheckpointError(LesionDecompError):
    code = "corrupt-checkpoint"


class ConfigError(LesionDecompError, ValueError):
    code = "invalid-config"
