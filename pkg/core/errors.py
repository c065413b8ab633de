#!/usr/bin/env python3
"""
DistillForge Error Types
Typed failures raised by the library; the CLI maps them to exit codes
"""


class DistillForgeError(Exception):
    """Root of every error raised by distillforge"""


# diffnet

class ShapeError(DistillForgeError, ValueError):
    """Tensor dimensions disagree with the network spec or batch"""


class NumericError(DistillForgeError, ValueError):
    """Non-finite values where finite ones are required"""


class DivergenceError(DistillForgeError, RuntimeError):
    """Parameters became non-finite during training or unrolling"""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class LabelValidationError(DistillForgeError, ValueError):
    """Labels inconsistent with the requested loss mode"""


class UnrollError(DistillForgeError, ValueError):
    """Inner unroll arguments or tape are inconsistent"""


# trajstore

class BufferFormatError(DistillForgeError, ValueError):
    """Trajectory buffer cannot be parsed"""


class BufferMagicError(BufferFormatError):
    """Buffer does not start with the expected magic bytes"""


class BufferVersionError(BufferFormatError):
    """Buffer version is not supported"""


class BufferTruncatedError(BufferFormatError):
    """Buffer is shorter than its header promises"""

    def __init__(self, expected: int, actual: int):
        super().__init__(f"Truncated buffer: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class BufferChecksumError(BufferFormatError):
    """Trailing CRC32 does not match the payload"""


class TrajectoryRangeError(DistillForgeError, IndexError):
    """Requested epoch pair lies outside the trajectory"""


class ScheduleError(DistillForgeError, ValueError):
    """Matching range bounds are inconsistent"""


class ExpertTrainingError(DistillForgeError, ValueError):
    """Expert training cannot start with the given inputs"""


# distill

class DegeneratePairError(DistillForgeError, ValueError):
    """Expert start and target coincide, so the matching loss is undefined"""


class InitializationError(DistillForgeError, ValueError):
    """Synthetic dataset cannot be seeded from the real data"""

    def __init__(self, message: str, class_index: int):
        super().__init__(message)
        self.class_index = class_index


class DistillConfigError(DistillForgeError, ValueError):
    """Distillation hyper-parameters are invalid"""


# evalharness

class EvalShapeError(DistillForgeError, ValueError):
    """Distilled data does not fit the evaluation setup"""


class LabelAuditError(DistillForgeError, ValueError):
    """Artifact carries no label information to audit"""


class EvalConfigError(DistillForgeError, ValueError):
    """Evaluation hyper-parameters are invalid"""


# datakit

class ArtifactError(DistillForgeError, ValueError):
    """Distilled-dataset export cannot be read"""


class ArtifactMissingError(ArtifactError):
    """A required export file is missing"""


class ArtifactHeaderError(ArtifactError):
    """An export file header is malformed"""


class ArtifactRowCountError(ArtifactError):
    """Export row counts disagree with classes * ipc"""


class NormalizationError(DistillForgeError, ValueError):
    """Channel statistics cannot normalize the data"""

    def __init__(self, message: str, channel: int):
        super().__init__(message)
        self.channel = channel


class LayoutError(DistillForgeError, ValueError):
    """Rows cannot be reshaped into the channel layout"""


class ToySpecError(DistillForgeError, ValueError):
    """Toy dataset parameters are invalid"""


# cli

class ConfigError(DistillForgeError, ValueError):
    """Run config cannot be parsed or validated"""

    def __init__(self, message: str, line: int = 0):
        prefix = f"line {line}: " if line else ""
        super().__init__(f"{prefix}{message}")
        self.line = line
