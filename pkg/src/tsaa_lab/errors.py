"""Exception hierarchy.

Everything raised on purpose by the library derives from :class:`LabError`.
The CLI maps these to exit status 2 (user or configuration error); anything
else escaping a subcommand is treated as an internal error.
"""


class LabError(Exception):
    """Base class for all library errors."""


class ValidationError(LabError, ValueError):
    """A value violates a type invariant (degenerate box, bad scene, ...)."""


class ConfigError(LabError, ValueError):
    """A configuration section is invalid or inconsistent."""


class ContractError(LabError, ValueError):
    """Arguments are individually valid but do not fit together."""


class EmptyInputError(LabError, ValueError):
    """An operation that needs boxes or targets received none."""


class InfeasibleError(LabError, ValueError):
    """A matching problem has no solution (e.g. fewer anchors than targets)."""


class DomainError(LabError, ValueError):
    """An encode target lies outside the codec's domain."""


class NumericRangeError(LabError, ArithmeticError):
    """Offsets would produce non-finite or absurd box extents."""


class GenerationError(LabError, RuntimeError):
    """Scene generation could not satisfy a configured constraint."""


class UndefinedMetricError(LabError, ValueError):
    """A metric is undefined for the given inputs (e.g. zero ground truth)."""


class ParseError(LabError, ValueError):
    """A file could not be parsed; the message carries line/field context."""
