"""Exception hierarchy shared across the package.

Document-validation errors derive from ValidationError so callers (the CLI,
the proxy control API) can map them to a single exit code / HTTP status.
Runtime errors raised on the enforcement path are caught by the proxy and
folded into deny verdicts; they never cross a request boundary.
"""


class CellgateError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(CellgateError):
    """A document (sitemap, policy set, composite, config) failed validation."""


class SchemaError(ValidationError):
    """Missing, extra, or ill-typed field in a structured document."""


class PatternSyntaxError(ValidationError):
    """URL pattern violates the wildcard grammar."""


class HostError(ValidationError):
    """URL pattern host falls outside the sitemap's domain."""


class OverlapError(ValidationError):
    """Two sitemap entries can match the same concrete request."""

    def __init__(self, first: str, second: str, detail: str = ""):
        self.first = first
        self.second = second
        msg = f"entries {first!r} and {second!r} can match the same request"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class UnknownActionError(ValidationError):
    """A policy references a semantic action absent from the sitemap."""


class PartialOrderViolation(ValidationError):
    """Two allow/condition policies overlap without one containing the other."""

    def __init__(self, violations):
        self.violations = list(violations)
        pairs = ", ".join(f"({v.first}, {v.second})" for v in self.violations)
        super().__init__(f"policy set is not partially ordered: {pairs}")


class UnknownPolicyError(ValidationError):
    """A composite selection names a policy absent from the set."""


class ParamTypeError(ValidationError):
    """A supplied parameter does not conform to the policy's schema."""


class MissingParamsError(ValidationError):
    """A condition policy was selected without its parameters."""


class ParseError(ValidationError):
    """Condition expression source is syntactically invalid."""

    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} (at position {position})")


class UnknownNamespaceError(ParseError):
    """Condition identifier is not rooted at params. or args."""


class UnknownArgError(CellgateError):
    """A context report names an argument no sitemap entry declares."""


class MissingArgsError(CellgateError):
    """Required condition arguments could not be resolved."""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(f"missing arguments: {', '.join(self.missing)}")


class StaleArgsError(CellgateError):
    """DOM-sourced arguments are unsettled or past their freshness deadline."""


class SettleTimeout(CellgateError):
    """A pending action's effects did not settle within the deadline."""


class FetchError(CellgateError):
    """A hosted bundle document could not be retrieved."""


class ProviderError(CellgateError):
    """The selection provider failed at the transport or envelope level."""


class SelectionError(CellgateError):
    """Provider output violated the selection schema after retry."""
