"""Exception and warning types raised across the package."""


class BasilError(Exception):
    """Base class for all errors raised by basil."""


class ValidationError(BasilError, ValueError):
    """Bad user input (shapes, values, file contents)."""


class NumericalError(BasilError, ArithmeticError):
    """A computation hit a numerically degenerate configuration."""


class DimensionMismatch(ValidationError):
    pass


class ZeroVarianceColumn(ValidationError):
    def __init__(self, gene_id):
        super().__init__(f"column {gene_id!r} has zero sample variance")
        self.gene_id = gene_id


class EmptyGeneSetMatrix(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, path=None, line=None, column=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line
        self.column = column


class NonBinaryEntry(ParseError):
    pass


class DuplicateGeneId(ValidationError):
    pass


class AllSetsFiltered(ValidationError):
    pass


class EmptyIntersection(ValidationError):
    pass


class MissingGenes(ValidationError):
    def __init__(self, missing):
        self.missing = list(missing)
        head = ", ".join(self.missing[:5])
        more = "" if len(self.missing) <= 5 else f" (+{len(self.missing) - 5} more)"
        super().__init__(f"{len(self.missing)} genes missing from gene-set matrix: {head}{more}")


class DegenerateResidual(NumericalError):
    pass


class UndefinedMean(NumericalError):
    pass


class InvariantViolation(NumericalError):
    pass


class InfeasibleDensity(ValidationError):
    pass


class ZeroTruth(ValidationError):
    pass


class InsufficientDraws(ValidationError):
    pass


class SubsetTooLarge(ValidationError):
    pass


class RankDeficientWarning(UserWarning):
    """A decomposition or basis was computed at lower rank than requested."""


class InfiniteShrinkageWarning(UserWarning):
    """An estimated prior variance is exactly zero; its component collapses."""


__all__ = [
    "BasilError",
    "ValidationError",
    "NumericalError",
    "DimensionMismatch",
    "ZeroVarianceColumn",
    "EmptyGeneSetMatrix",
    "ParseError",
    "NonBinaryEntry",
    "DuplicateGeneId",
    "AllSetsFiltered",
    "EmptyIntersection",
    "MissingGenes",
    "DegenerateResidual",
    "UndefinedMean",
    "InvariantViolation",
    "InfeasibleDensity",
    "ZeroTruth",
    "InsufficientDraws",
    "SubsetTooLarge",
    "RankDeficientWarning",
    "InfiniteShrinkageWarning",
]
