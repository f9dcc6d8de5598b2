"""Exception hierarchy shared by the solvers and the command line driver."""


class HermfpError(Exception):
    """Base class for all errors raised by this package."""


class QuadratureError(HermfpError):
    """Node/weight computation or adaptive integration failed."""


class SolverError(HermfpError):
    """A time integration or steady-state computation did not succeed."""


class SingularSystemError(SolverError):
    """A linear system that had to be solved was singular."""


class ConvergenceError(SolverError):
    """An iteration stopped before reaching its tolerance.

    ``residual`` carries the last residual that was observed.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class OscillationError(SolverError):
    """Semi-implicit marching produced a growing alternating moment."""


class SimulationError(HermfpError):
    """The particle system blew up (non-finite state)."""


class ConfigError(HermfpError):
    """Invalid run configuration."""
