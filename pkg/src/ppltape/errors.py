"""Exception hierarchy shared by every layer of the library."""


class PPLError(Exception):
    """Base class for all library errors."""


class ShapeError(PPLError, ValueError):
    """Incompatible shapes for an operation, assignment or feed."""


class TapeError(PPLError):
    """A value was used outside the tape that created it, or no tape is active."""


class NonDeterministicError(PPLError):
    """Two evaluations of a builder with identical inputs disagreed."""


class SupportError(PPLError, ValueError):
    """A value lies outside the support of a distribution, or a parameter is invalid."""


class NotReparameterizableError(PPLError, TypeError):
    """Pathwise sampling was requested from a distribution that has none."""


class BindingError(PPLError, KeyError):
    """A binding names a random variable the model never creates, or a name is reused."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ConfigError(PPLError, ValueError):
    """Invalid inference configuration or unsupported approximation family."""


class FeedError(PPLError, KeyError):
    """A feed slot was not fed or was fed with the wrong shape."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class StoreFullError(PPLError):
    """An Empirical sample store has no free rows left."""


class DivergenceError(PPLError, FloatingPointError):
    """A loss, gradient or Hamiltonian became non-finite."""
