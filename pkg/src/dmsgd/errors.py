"""Exception types raised across the toolkit."""


class DmsgdError(Exception):
    """Base class for every error raised by this package."""


class BadParam(DmsgdError, ValueError):
    pass


class BadConfig(DmsgdError, ValueError):
    pass


class SpectralViolation(DmsgdError):
    """A mixing matrix fails symmetry, double stochasticity or the single unit eigenvalue."""


class NumericalDivergence(DmsgdError, FloatingPointError):
    """The iteration produced non-finite values or left the stability guard."""

    def __init__(self, step, detail=""):
        self.step = step
        msg = f"iteration diverged at step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class GridMismatch(DmsgdError, ValueError):
    pass


class TooLarge(DmsgdError, ValueError):
    pass


class InsufficientSamples(DmsgdError, ValueError):
    pass


class BadRegime(DmsgdError, ValueError):
    pass


class SchemaError(DmsgdError, ValueError):
    """An output file declares a schema version this package does not read."""
