"""Exception types shared across the package.

Input problems raise :class:`InputError` (a ``ValueError``), numerical failures
raise :class:`NumericalError` (an ``ArithmeticError``). The CLI maps the two
families onto exit codes 2 and 3.
"""


class InputError(ValueError):
    """Malformed or inconsistent user input."""


class NumericalError(ArithmeticError):
    """A numerical routine failed to produce a trustworthy result."""


class TrainingDivergedError(NumericalError):
    """The training objective became non-finite."""


class FactorizationError(NumericalError):
    def __init__(self, message, damping):
        super().__init__(f"{message} (damping={damping:.3e})")
        self.damping = damping


class ConvergenceError(NumericalError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (relative residual={residual:.3e})")
        self.residual = residual
