"""Exception hierarchy shared by every odmoe module."""


class ODMoEError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ODMoEError, ValueError):
    """An invalid model, cluster, cost or experiment configuration."""


class PreconditionError(ODMoEError):
    pass


class NumericError(ODMoEError, ArithmeticError):
    """Non-finite values or overflow inside the toy model numerics."""


class RoutingError(ODMoEError, ValueError):
    pass


class InputError(ODMoEError, ValueError):
    pass


class AlignmentError(ODMoEError, ValueError):
    """Shadow/main state mismatch during token or KV alignment."""


class PlanningError(ODMoEError, ValueError):
    pass


class SimulationError(ODMoEError, RuntimeError):
    """Internal simulator failure, e.g. a deadlock. Carries a trace dump."""

    def __init__(self, message, trace_dump=""):
        super().__init__(message)
        self.trace_dump = trace_dump
