"""Exception types shared across the package."""


class SpctError(Exception):
    """Base class for all package errors."""


class ContractError(SpctError, ValueError):
    """An argument violates an operation's precondition."""


class CapacityError(ContractError):
    """A requested tensor exceeds the configured memory budget."""


class ImageFormatError(SpctError, OSError):
    """A PGM/PPM or depth file is malformed."""


class DivergenceError(SpctError, ArithmeticError):
    """An iterative solver produced non-finite values."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class StageError(SpctError, RuntimeError):
    """A tracker or pipeline stage failed on a specific frame."""

    def __init__(self, message: str, frame: int):
        super().__init__(f"frame {frame}: {message}")
        self.frame = frame
