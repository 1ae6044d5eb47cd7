"""Exception types raised across the toolkit.

All errors derive from ``MvgcError`` (itself a ``ValueError``) so the CLI can
map any of them to a usage/input failure.
"""


class MvgcError(ValueError):
    """Base class for toolkit errors."""


class DegenerateDepth(MvgcError):
    pass


class InvalidCamera(MvgcError):
    pass


class UnknownPreset(MvgcError):
    pass


class InvalidShift(MvgcError):
    pass


class DimensionMismatch(MvgcError):
    pass


class NoSamples(MvgcError):
    pass


class InvalidSpec(MvgcError):
    pass


class ShapeMismatch(MvgcError):
    pass


class Divergence(MvgcError):
    """Raised when an optimisation loss becomes non-finite."""


class InvalidScene(MvgcError):
    pass


class OutOfRange(MvgcError):
    pass


class DegenerateBaseline(MvgcError):
    """Oracle and direct-transfer scores coincide, the gap is undefined."""
