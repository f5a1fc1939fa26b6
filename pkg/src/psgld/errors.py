"""Exception types raised across the package."""


class PsgldError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(PsgldError, ValueError):
    """A numerical function was evaluated outside its domain."""


class ContractViolation(PsgldError, ValueError):
    """Arguments do not satisfy an operation's preconditions."""


class ConfigurationError(PsgldError, ValueError):
    pass


class UnsupportedModelError(PsgldError, ValueError):
    pass


class ModelError(PsgldError, ValueError):
    """Data is incompatible with the requested model (e.g. non-integer
    counts for the Gibbs sampler)."""


class NonFiniteError(PsgldError, FloatingPointError):
    """A sampler update produced NaN or Inf."""

    def __init__(self, message, iteration=None, block=None):
        super().__init__(message)
        self.iteration = iteration
        self.block = block


class IngestError(PsgldError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ProtocolError(PsgldError, RuntimeError):
    """Ring protocol invariant broken (lost, duplicated or misrouted message)."""


class TransportError(PsgldError, RuntimeError):
    """Corrupt envelope or transport failure."""


class TransportTimeout(TransportError):
    pass
