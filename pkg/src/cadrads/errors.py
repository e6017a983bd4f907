"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 1 for usage/config
problems, 2 for data problems, 3 for numerical failures.
"""


class CadradsError(Exception):
    exit_code = 1
    stage = "cadrads"

    def __init__(self, message, stage=None):
        super().__init__(message)
        if stage is not None:
            self.stage = stage


class ConfigError(CadradsError, ValueError):
    exit_code = 1
    stage = "config"


class InvalidParams(ConfigError):
    pass


class DivisibilityError(ConfigError):
    stage = "model"


class ShapeMismatch(CadradsError, ValueError):
    exit_code = 2
    stage = "shape"


class DataError(CadradsError):
    exit_code = 2
    stage = "data"


class PreprocessFailure(DataError):
    stage = "preprocess"


class AllBackground(PreprocessFailure):
    pass


class OutOfRange(DataError, ValueError):
    pass


class MissingFile(DataError, FileNotFoundError):
    pass


class InsufficientStratum(DataError):
    stage = "split"


class NoHealthyTraining(DataError):
    stage = "impute"


class EmptyClass(DataError):
    stage = "training"


class OneClassOnly(DataError, ValueError):
    stage = "evaluation"


class DegenerateResample(DataError):
    stage = "evaluation"


class EmptyBackground(DataError):
    stage = "explain"


class PatchTooLarge(ConfigError):
    stage = "explain"


class PerplexityTooHigh(ConfigError):
    stage = "tsne"


class GraphStateMissing(CadradsError, RuntimeError):
    exit_code = 3
    stage = "model"


class NumericalError(CadradsError, ArithmeticError):
    exit_code = 3
    stage = "numerics"


class NonFiniteActivation(NumericalError):
    stage = "forward"


class NonFiniteLoss(NumericalError):
    stage = "training"


class EmptyMaskWarning(UserWarning):
    pass
