"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: DomainError -> 2 (bad configuration),
DataError -> 3 (malformed or inconsistent data), StatisticalCheckError -> 4
(a verification gate failed its tolerance).
"""


class DomainError(ValueError):
    """A parameter is outside its physical or contractual domain."""


class DataError(ValueError):
    """Input data is malformed, truncated, or internally inconsistent."""


class UndefinedStatisticError(DataError):
    """The requested statistic does not exist for this sample (e.g. all-zero
    series has no Fano factor)."""


class StatisticalCheckError(RuntimeError):
    """A statistical acceptance check failed its stated tolerance."""
