"""Exception hierarchy.

Validation-type errors (bad input, bad configuration) derive from
``ValidationError``; runtime failures such as divergence derive from
``RuntimeFailure``. The CLI maps the two families to exit codes 2 and 1.
"""


class DiffGANError(Exception):
    pass


class ValidationError(DiffGANError):
    pass


class RuntimeFailure(DiffGANError):
    pass


class ConfigurationError(ValidationError):
    pass


class ContractError(ValidationError):
    pass


class StepRangeError(ValidationError):
    pass


class ScheduleError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class DatasetError(ValidationError):
    pass


class ParseError(DatasetError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateDimensionError(DatasetError):
    def __init__(self, dim: int):
        self.dim = dim
        super().__init__(f"dimension {dim} is constant on the training partition")


class ThresholdError(ValidationError):
    pass


class TrainingError(RuntimeFailure):
    pass


class DivergenceError(TrainingError):
    def __init__(self, message: str, iteration: int):
        self.iteration = iteration
        super().__init__(f"{message} (iteration {iteration})")
