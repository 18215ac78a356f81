"""Exception types shared by the solver modules."""


class ProfileError(Exception):
    """Base class for every error raised by the package."""


class RangeError(ProfileError, ValueError):
    """A parameter lies outside its admissible open interval.

    ``name`` identifies the offending parameter ("a", "mu" or "lambda").
    """

    def __init__(self, name, message):
        super().__init__(f"{name}: {message}")
        self.name = name


class DomainError(ProfileError, ValueError):
    pass


class ConfigError(ProfileError, ValueError):
    pass


class NaNError(ProfileError, FloatingPointError):
    pass


class PositivityError(ProfileError, ValueError):
    pass


class FitError(ProfileError):
    pass


class TailError(ProfileError):
    pass


class ConvergenceError(ProfileError):
    pass


class StepError(ProfileError):
    pass


class EventError(ProfileError):
    pass


class QuadError(ProfileError):
    pass


class DivergenceError(ProfileError):
    pass
