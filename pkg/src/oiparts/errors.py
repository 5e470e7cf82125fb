"""Error and warning types shared across the package."""


class FormatError(ValueError):
    """A file does not conform to its container format (magic, header, payload)."""


class ShapeError(ValueError):
    """An array has the wrong dtype, rank, or dimensions for the operation."""


class ValidationError(ValueError):
    """Values violate a documented invariant (range, finiteness, uniqueness)."""


class SolverDidNotConverge(RuntimeError):
    """Iterative solve hit its iteration cap before reaching tolerance."""


class ThinPartWarning(UserWarning):
    """A mask plane nearly vanished during downsampling (max soft value < 0.5)."""


class DegenerateCenterWarning(UserWarning):
    """A clustering center collapsed to the zero vector; assignment fell back to Euclidean distance."""
