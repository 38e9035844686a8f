"""Exception hierarchy shared by every tabdiff module."""


class TabDiffError(Exception):
    kind = "error"


class ShapeError(TabDiffError, ValueError):
    kind = "shape"

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        listed = " vs ".join(str(s) for s in self.shapes)
        msg = f"{op}: shape mismatch {listed}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericOverflowError(TabDiffError, ArithmeticError):
    kind = "numeric-overflow"


class AutodiffError(TabDiffError, RuntimeError):
    kind = "autodiff"


class ScheduleError(TabDiffError, ValueError):
    kind = "schedule"


class AnnotationParseError(TabDiffError, ValueError):
    kind = "annotation-parse"

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} at byte {offset}"
        super().__init__(message)


class AnnotationValidationError(TabDiffError, ValueError):
    kind = "annotation-invalid"

    def __init__(self, message: str, box=None):
        self.box = box
        if box is not None:
            message = f"{message}: {box}"
        super().__init__(message)


class StructureConstraintError(TabDiffError, ValueError):
    kind = "structure-constraints"


class CacheFormatError(TabDiffError, ValueError):
    kind = "cache-format"


class ConfigError(TabDiffError, ValueError):
    kind = "config"


class MissingArtifactError(TabDiffError, FileNotFoundError):
    kind = "missing-artifact"

    def __init__(self, path, produced_by: str):
        self.path = str(path)
        self.produced_by = produced_by
        super().__init__(f"{self.path} not found (run `tabdiff {produced_by}` first)")
