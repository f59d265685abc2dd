"""Exception types shared across the package."""


class PcakdError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(PcakdError, ValueError):
    """An array has the wrong shape, dtype, or dimension pairing."""


class NumericalError(PcakdError, ArithmeticError):
    """A kernel produced NaN/Inf or an input is numerically invalid."""


class ConvergenceError(PcakdError, RuntimeError):
    """An iterative solver exhausted its budget without converging."""


class TrainingDivergence(PcakdError, RuntimeError):
    """A training loop detected a diverging or non-finite loss."""


class ContainerError(PcakdError, ValueError):
    """A model container is malformed, truncated, or corrupted."""


class ImageReadError(PcakdError, ValueError):
    """An image file could not be read or is unusable (too small)."""


class MissingBlockError(PcakdError, ValueError):
    """A model container lacks a trained block required by the pipeline."""
