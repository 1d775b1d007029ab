"""Exception types raised across the package."""


class INBDError(Exception):
    """Base class for all package errors."""


class EmptyMask(INBDError):
    """A mask that must contain positive pixels was empty (e.g. no center ring)."""


class NoBoundaryAhead(INBDError):
    """Too few rays hit a boundary pixel beyond the current ring."""


class AllUndefined(INBDError):
    """Every entry of a circular signal is undefined."""


class ShapeMismatch(INBDError, ValueError):
    pass


class BadKernel(INBDError, ValueError):
    pass


class TooSmall(INBDError, ValueError):
    pass


class NonFiniteGradient(INBDError, FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class NoGroundTruth(INBDError):
    pass


class EmptyForeground(INBDError):
    pass


class ConfigInvalid(INBDError, ValueError):
    pass
