"""Exception hierarchy shared by every module of the toolkit."""


class TrafficPIMLError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(TrafficPIMLError, ValueError):
    """Bad inputs: unbound variables, shape mismatches, malformed files."""


class NumericError(TrafficPIMLError, ArithmeticError):
    """A value or derivative is undefined at the evaluation point."""


class DomainError(TrafficPIMLError, ValueError):
    """A physical quantity left its admissible range."""


class CFLViolationError(ConfigurationError):
    """Solver time step violates the CFL bound."""

    def __init__(self, dt, max_dt):
        self.dt = dt
        self.max_dt = max_dt
        super().__init__(f"time step {dt:g} s violates CFL; require dt <= {max_dt:g} s")


class DivergenceError(TrafficPIMLError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, loss):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}")
