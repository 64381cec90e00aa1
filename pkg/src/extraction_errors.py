"""
Extraction Errors
=================
Every failure the extraction pipeline can report, with the CLI exit code
attached to the class.

    ExtractionError
     ├── ConfigError                (2)
     ├── InputError                 (2)
     │    ├── SignalTooShort
     │    ├── SampleRateMismatch
     │    ├── TooManyBlocks
     │    ├── InvalidGeometry
     │    ├── InvalidScenario
     │    └── UndefinedMetric
     └── NumericalError             (3)
          ├── DegenerateCovariance
          ├── SingularParameterization
          ├── DegenerateNu
          └── SingularAuxSystem
"""

from typing import Optional


class ExtractionError(Exception):
    exit_code = 1


class ConfigError(ExtractionError):
    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        self.field = field
        self.line = line
        self.reason = message
        where = ""
        if field:
            where = f"{field}"
            if line is not None:
                where += f" (line {line})"
            where += ": "
        super().__init__(f"{where}{message}")


class InputError(ExtractionError):
    exit_code = 2


class SignalTooShort(InputError):
    pass


class SampleRateMismatch(InputError):
    pass


class TooManyBlocks(InputError):
    pass


class InvalidGeometry(InputError):
    pass


class InvalidScenario(InputError):
    pass


class UndefinedMetric(InputError):
    pass


class NumericalError(ExtractionError):
    exit_code = 3


class DegenerateCovariance(NumericalError):
    pass


class SingularParameterization(NumericalError):
    pass


class DegenerateNu(NumericalError):
    pass


class SingularAuxSystem(NumericalError):
    pass
