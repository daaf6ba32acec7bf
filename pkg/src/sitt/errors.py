"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: configuration problems
exit 2, numeric/runtime failures exit 3, the compute budget guard exits 4.
"""


class SittError(Exception):
    """Base class for all package errors."""


class ConfigError(SittError):
    """Invalid configuration: bad file, bad key, inconsistent dimensions."""


class NumericError(SittError):
    """A computation produced non-finite values or an unsolvable system."""


class BudgetError(SittError):
    """A requested run exceeds the pretraining compute guard."""
