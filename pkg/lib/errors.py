"""
Exception hierarchy shared by the library and the command layer
"""


class HGRNError(Exception):
    """Base class for every error raised by the library"""


class DimensionError(HGRNError):
    """Operand shapes do not agree"""


class ContractError(HGRNError):
    """A documented precondition was violated"""


class NumericError(HGRNError):
    """A computation produced NaN or Inf"""

    def __init__(self, stage, message=None):
        self.stage = stage
        super().__init__(message or f"non-finite values at stage '{stage}'")


class SizeError(HGRNError):
    """A size cap or memory budget was exceeded"""


class ConfigError(HGRNError):
    """Invalid configuration key, value or file"""


class CheckpointError(HGRNError):
    """Checkpoint file is malformed or does not match the configuration"""


class TrainingAborted(HGRNError):
    """Training stopped on a non-finite loss"""

    def __init__(self, step, diagnostics):
        self.step = step
        self.diagnostics = diagnostics
        lines = [f"non-finite loss at step {step}"]
        for key, value in diagnostics.items():
            lines.append(f"  {key}: {value}")
        super().__init__("\n".join(lines))
