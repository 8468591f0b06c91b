"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class BatchSizeError(ValueError):
    """A train-mode normalization received too few examples."""


class DomainLookupError(KeyError):
    """A domain has no branch in a domain-specific layer."""


class ConfigurationError(ValueError):
    """Invalid experiment, dataset or layer configuration."""


class DegeneratePriorError(ValueError):
    """A class weight was requested for a class with zero prior mass."""


class TrainingFailure(RuntimeError):
    """Training diverged (the loss stayed non-finite)."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration
