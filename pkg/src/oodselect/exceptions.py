"""Exception hierarchy.

Every error raised on purpose by this package derives from
:class:`OODSelectError`, which is itself a ``ValueError`` so callers that
already guard against bad input keep working.
"""


class OODSelectError(ValueError):
    """Base class for all package errors."""


# -- ingestion -------------------------------------------------------------


class NonBinaryCell(OODSelectError):
    def __init__(self, row, col, value=None):
        self.row = row
        self.col = col
        self.value = value
        super().__init__(f"non-binary cell {value!r} at row={row}, col={col}")


class RaggedRow(OODSelectError):
    def __init__(self, row, expected, got):
        self.row = row
        super().__init__(f"row {row} has {got} cells, expected {expected}")


class DuplicateModelId(OODSelectError):
    pass


class DuplicateExampleId(OODSelectError):
    pass


class EmptyMatrix(OODSelectError):
    pass


class UnknownId(OODSelectError):
    pass


class DimensionMismatch(OODSelectError):
    pass


# -- numerics --------------------------------------------------------------


class DegenerateSelection(OODSelectError):
    """Selection mass fell below the weight floor."""


class DegenerateVariance(OODSelectError):
    """A vector entering a correlation has zero variance."""


class DegenerateCorrelation(OODSelectError):
    pass


class TooFewModels(OODSelectError):
    pass


class InsufficientFamilies(OODSelectError):
    pass


class EmptySets(OODSelectError):
    pass


class NormalizationDegenerate(OODSelectError):
    pass


class CombinatorialGuardExceeded(OODSelectError):
    pass


# -- optimisation ----------------------------------------------------------


class InvalidConfig(OODSelectError):
    pass


class OptimizationFailed(OODSelectError):
    pass
