"""Exception types shared across the package."""


class FedFairError(Exception):
    pass


class SchemaError(FedFairError, ValueError):
    """A CSV or schema file does not match what was declared."""


class RowError(FedFairError, ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SizeError(FedFairError, ValueError):
    """A size precondition (split, partition, non-empty input) failed."""


class EmptyDatasetError(SizeError):
    pass


class ParameterError(FedFairError, ValueError):
    pass


class ShapeError(FedFairError, ValueError):
    pass


class EmptyCellError(FedFairError, ValueError):
    """A (group, class) cell needed by an estimator has no instances."""


class NoValidClientsError(FedFairError, RuntimeError):
    """No client delivered a usable local estimation this round."""


class ConfigError(FedFairError, ValueError):
    pass


class EvaluationError(FedFairError, ValueError):
    pass
