"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
stable exit codes (2 usage, 3 data, 4 numeric).
"""


class MatrixKitError(Exception):
    exit_code = 3
    kind = "data"


class ConfigError(MatrixKitError, ValueError):
    exit_code = 2
    kind = "usage"


class InvalidCameraError(MatrixKitError, ValueError):
    pass


class DegenerateRayMapError(MatrixKitError, ValueError):
    exit_code = 4
    kind = "numeric"


class DegenerateSceneError(MatrixKitError, ValueError):
    exit_code = 4
    kind = "numeric"


class InvalidDepthError(MatrixKitError, ValueError):
    pass


class ShapeError(MatrixKitError, ValueError):
    pass


class InsufficientViewsError(MatrixKitError, ValueError):
    pass


class NothingToGenerateError(MatrixKitError, ValueError):
    pass


class ViewRangeError(MatrixKitError, IndexError):
    exit_code = 2
    kind = "usage"


class NoOverlapError(MatrixKitError, ValueError):
    pass


class EmptyCloudError(MatrixKitError, ValueError):
    pass


class SceneIOError(MatrixKitError, OSError):
    """Missing or corrupt file inside a dataset directory."""

    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__(f"{self.path}: {reason}")


class NumericError(MatrixKitError, FloatingPointError):
    exit_code = 4
    kind = "numeric"


class StageError(MatrixKitError):
    """Failure inside one stage of a multi-stage pipeline."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 3)
        self.kind = getattr(cause, "kind", "data")
        super().__init__(f"stage '{stage}' failed: {cause}")
