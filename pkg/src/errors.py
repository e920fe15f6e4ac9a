"""Exception hierarchy shared by every module of the pipeline."""

from __future__ import annotations


class FibrosisError(Exception):
    """Base class for all pipeline errors; the CLI turns these into exit code 1."""


class ShapeError(FibrosisError):
    def __init__(self, op: str, dim: str, expected: object, got: object) -> None:
        self.op = op
        self.dim = dim
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: dimension '{dim}' expected {expected}, got {got}")


class NonFiniteError(FibrosisError):
    """A forward value, loss or gradient contained NaN or Inf."""


class TapeError(FibrosisError):
    """Backward called on something that was never recorded."""


class ViewError(FibrosisError):
    def __init__(self, view: object) -> None:
        self.view = view
        super().__init__(f"view id must be in 1..6, got {view!r}")


class RoiError(FibrosisError):
    """Liver mask unusable for building a clinical ROI."""


class ManifestError(FibrosisError):
    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        prefix = f"manifest line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class MissingFileError(ManifestError):
    pass


class MalformedPgmError(ManifestError):
    pass


class InconsistentLabelError(ManifestError):
    pass


class InvalidViewError(ManifestError):
    pass


class CheckpointError(FibrosisError):
    pass


class ConfigError(FibrosisError):
    pass


class SplitError(FibrosisError):
    pass


class TrainingError(FibrosisError):
    def __init__(self, message: str, study_id: str | None = None) -> None:
        self.study_id = study_id
        suffix = f" (study {study_id})" if study_id is not None else ""
        super().__init__(message + suffix)


class MetricError(FibrosisError):
    pass
