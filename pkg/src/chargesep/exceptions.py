"""Exception hierarchy shared by all modules."""


class ChargeSepError(Exception):
    """Base class for all package errors."""


class ConfigError(ChargeSepError, ValueError):
    """Invalid or incomplete configuration (maps to CLI exit code 2)."""


class NumericalError(ChargeSepError, RuntimeError):
    """A numerical contract was violated (maps to CLI exit code 1)."""


class TruncationError(NumericalError):
    """A state does not fit into the truncated Fock space."""


class SolverError(NumericalError):
    """Krylov solver failed to reach the requested residual."""


class IntegrationError(NumericalError):
    """Time propagation failed (step underflow, trace drift)."""
