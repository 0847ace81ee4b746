"""Exception hierarchy shared by the library and the command layer."""


class HwmError(Exception):
    """Base error; `code` is the machine-readable token printed by the CLI"""

    code = "error"
    retriable = False


class ConstraintUnsatisfiedError(HwmError):
    """Layout rejection sampling ran out of attempts"""

    code = "constraint_unsatisfied"
    retriable = True


class ShapeError(HwmError, ValueError):
    """Tensor shapes are incompatible for an operation"""

    code = "shape_mismatch"

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        rendered = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class NotScalarError(HwmError, ValueError):
    code = "not_scalar"


class ConfigError(HwmError, ValueError):
    code = "config_invalid"


class DatasetError(HwmError):
    code = "dataset_invalid"


class MissingFileError(HwmError, FileNotFoundError):
    code = "missing_file"


class NonFiniteLossError(HwmError, FloatingPointError):
    """Training produced NaN or inf; carries the loss breakdown that failed"""

    code = "non_finite_loss"

    def __init__(self, epoch, batch, terms):
        self.epoch = epoch
        self.batch = batch
        self.terms = dict(terms)
        detail = ", ".join(f"{k}={v:.4g}" for k, v in self.terms.items())
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch} ({detail})")


class LineageError(HwmError):
    """High-level checkpoint was trained on a different encoder"""

    code = "lineage_mismatch"


class TrajectoryTooShortError(HwmError, ValueError):
    code = "too_short"


class ChunkTooLongError(HwmError, ValueError):
    code = "chunk_too_long"


class LayoutOverlapError(HwmError):
    """Evaluation layouts intersect the layouts a model was trained on"""

    code = "layout_overlap"
