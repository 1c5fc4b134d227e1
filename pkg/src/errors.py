"""
Error types shared across the proxy-token pipeline.

Every error that should end a CLI run carries the process exit code the
command-line front end reports for it.
"""


class CMPTError(Exception):
    """Base class for pipeline errors with a CLI exit code"""

    exit_code = 1


class ConfigError(CMPTError):
    """Invalid or inconsistent run configuration"""

    exit_code = 2


class DataError(CMPTError):
    """Missing, malformed or infeasible data (datasets, protocols, checkpoints)"""

    exit_code = 3


class CheckpointError(DataError):
    """Manifest/payload mismatch, truncation or unsupported format version"""


class TrainingDivergenceError(CMPTError):
    """A loss or activation became NaN/Inf during optimization"""

    exit_code = 4


class GradcheckError(CMPTError):
    """Analytic and numeric gradients disagree beyond tolerance"""

    exit_code = 5


class ShapeError(ValueError):
    """Operand shapes do not conform"""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf"""

    def __init__(self, op, message=None):
        self.op = op
        super().__init__(message or f"non-finite value produced by op '{op}'")


class InvalidSampleError(ValueError):
    """A sample reached the fusion head with no modality present"""
