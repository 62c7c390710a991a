"""Shared exception types."""


class NumericalFailure(RuntimeError):
    """A linear-algebra step failed even after all recovery attempts.

    Carries the jitter magnitudes that were tried before giving up so the
    caller can see how hard the factorization was pushed.
    """

    def __init__(self, message, attempted_jitters=()):
        super().__init__(message)
        self.attempted_jitters = tuple(attempted_jitters)


class EvaluationFailure(RuntimeError):
    """Raised by an objective/constraint callable at a non-computable point."""


class HandshakeError(RuntimeError):
    """External evaluator spoke a different protocol version (or garbage)."""


class OutOfBudget(RuntimeError):
    """The ledger refused a new evaluation because the cost budget is spent."""
