"""Exception taxonomy shared across the package."""


class G2SLocError(Exception):
    """Base class for all package errors."""


class ShapeError(G2SLocError, ValueError):
    """Incompatible array shapes; the message names both shapes."""

    def __init__(self, what: str, got, expected):
        super().__init__(f"{what}: got shape {tuple(got)}, expected {tuple(expected)}")


class ConfigError(G2SLocError, ValueError):
    """Invalid configuration value or inconsistent dimension setup."""


class NumericError(G2SLocError, ArithmeticError):
    """Non-finite value reached a place that must stay finite (CLI exit 2)."""


class TapeError(G2SLocError, RuntimeError):
    """Misuse of the reverse-mode tape (e.g. backward called twice)."""
