"""Self-similar axisymmetric Euler blow-up profiles by transport/potential iteration."""
from .params import ProfileParams, validate_and_derive

__all__ = ["ProfileParams", "validate_and_derive"]
