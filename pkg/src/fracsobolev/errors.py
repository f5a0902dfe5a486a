"""Exception hierarchy shared by the library and the CLI."""

from __future__ import annotations


class FracSobolevError(Exception):
    """Base class for all library errors."""


class ValidationError(FracSobolevError, ValueError):
    """Malformed input: domains, plans, configs, expressions."""


class DomainError(FracSobolevError, ValueError):
    """A query point lies outside the open domain."""


class MeshError(FracSobolevError):
    """A mesh cannot be produced at the requested scale."""


class ConstructionError(FracSobolevError):
    """Snowflake construction produced an invalid curve."""


class NumericalError(FracSobolevError, ArithmeticError):
    """A numerical procedure failed (singular system, no convergence)."""
