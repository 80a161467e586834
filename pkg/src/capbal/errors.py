class CapbalError(Exception):
    """Base class for package errors."""


class ConfigError(CapbalError, ValueError):
    pass


class DataError(CapbalError, ValueError):
    pass


class GenerationError(DataError):
    def __init__(self, doc_id, message):
        super().__init__(f"{doc_id}: {message}")
        self.doc_id = doc_id


class WeightError(CapbalError, ValueError):
    pass


class NumericalError(CapbalError, FloatingPointError):
    """Non-finite value detected during training."""

    def __init__(self, iteration, module, message="non-finite gradient"):
        super().__init__(f"iteration {iteration} [{module}]: {message}")
        self.iteration = iteration
        self.module = module
