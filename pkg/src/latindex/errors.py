"""Exception taxonomy shared by the whole pipeline.

Two families matter for the command line front end: validation problems
(bad files, broken invariants, degenerate inputs) exit with code 2,
numerical failures (non-finite values, degenerate scales) exit with
code 3. Everything else is a plain bug and propagates.
"""


class ValidationError(Exception):
    """Input data or configuration violates a documented invariant."""


class SchemaError(ValidationError):
    """A delimited file does not match its declared column schema."""


class DegenerateItemError(ValidationError):
    """A binary item is constant (or unobserved) across all units."""


class NumericalError(Exception):
    """A computation produced a non-finite or degenerate numerical result."""

    def __init__(self, message: str, node_index: int | None = None):
        super().__init__(message)
        self.node_index = node_index


class DegenerateScaleError(NumericalError):
    """Min-max rescaling is undefined because the input is constant."""
