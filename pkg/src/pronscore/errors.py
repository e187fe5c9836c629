"""Exception hierarchy shared by all pronscore modules.

``exit_code`` is what the command line returns for each class:
1 other, 2 usage, 3 missing file, 4 config conflict, 5 data error,
6 incompatible checkpoint, 7 training diverged.
"""


class PronScoreError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class RangeError(PronScoreError, ValueError):
    exit_code = 5


class ManifestParseError(PronScoreError, ValueError):
    exit_code = 5

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class ValidationError(PronScoreError, ValueError):
    exit_code = 5

    def __init__(self, message, utt_id=None, field=None):
        prefix = []
        if utt_id is not None:
            prefix.append(f"utt_id={utt_id!r}")
        if field is not None:
            prefix.append(f"field={field!r}")
        if prefix:
            message = f"{', '.join(prefix)}: {message}"
        super().__init__(message)
        self.utt_id = utt_id
        self.field = field


class InsufficientDataError(PronScoreError, ValueError):
    exit_code = 5


class DomainError(PronScoreError, ValueError):
    exit_code = 5


class ShapeError(PronScoreError, ValueError):
    exit_code = 5


class EmptyReductionError(PronScoreError, ValueError):
    exit_code = 5


class GradientError(PronScoreError, RuntimeError):
    pass


class LengthError(ValidationError):
    pass


class MissingLabelError(ValidationError):
    def __init__(self, utt_id, level):
        super().__init__(f"missing {level}-level label", utt_id=utt_id, field=level)
        self.level = level


class IncompatibleCheckpointError(PronScoreError, ValueError):
    exit_code = 6


class TrainingDivergedError(PronScoreError, RuntimeError):
    exit_code = 7


class InsufficientPoolError(PronScoreError, ValueError):
    exit_code = 5


class UndefinedCorrelationError(PronScoreError, ValueError):
    exit_code = 5


class ConfigConflictError(PronScoreError, ValueError):
    exit_code = 4
