"""Exception hierarchy shared by the library and the command line.

Every error carries the process exit code the CLI maps it to.
"""


class MolgeomError(Exception):
    exit_code = 1


class SchemaError(MolgeomError, ValueError):
    """Malformed document, config file or binary header."""

    exit_code = 2


class BondIndexError(SchemaError, IndexError):
    """A bond references an atom index outside the document."""


class GeometryError(MolgeomError, ValueError):
    exit_code = 3


class LengthError(MolgeomError, ValueError):
    """Structural sequence longer than the padded length."""

    exit_code = 4


class GrammarError(MolgeomError, ValueError):
    exit_code = 5


class UnsupportedTokenError(GrammarError):
    """Valid SELFIES symbol outside the supported subset."""


class MismatchError(MolgeomError, ValueError):
    exit_code = 5


class UnknownTokenError(MolgeomError, KeyError):
    exit_code = 5


class ShapeError(MolgeomError, ValueError):
    exit_code = 6


class DegenerateMaskError(MolgeomError, ValueError):
    exit_code = 6


class CacheMismatchError(MolgeomError, ValueError):
    exit_code = 6
