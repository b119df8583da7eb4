class SparseRegError(Exception):
    """Base class for every error raised by sparsereg."""


class DimensionError(SparseRegError, ValueError):
    pass


class NumericError(SparseRegError, ArithmeticError):
    pass


class UsageError(SparseRegError, RuntimeError):
    pass


class ConfigError(SparseRegError, ValueError):
    pass


class SplitError(SparseRegError, ValueError):
    pass


class ParseError(SparseRegError, ValueError):
    def __init__(self, message: str, offset: int | None = None, record: int | None = None):
        location = []
        if record is not None:
            location.append(f"record {record}")
        if offset is not None:
            location.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(location)})" if location else message)
        self.offset = offset
        self.record = record


class SchemaError(SparseRegError, ValueError):
    pass


class DivergenceError(NumericError):
    """A loss went non-finite or exceeded the divergence threshold.

    `curve` holds the learning curve recorded up to the failure once the
    training loop has attached it.
    """

    def __init__(self, step: int, loss_name: str, value: float):
        super().__init__(f"{loss_name} diverged at step {step}: {value!r}")
        self.step = step
        self.loss_name = loss_name
        self.value = value
        self.curve = None
