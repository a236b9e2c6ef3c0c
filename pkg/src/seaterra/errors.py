"""Exception hierarchy. The CLI maps each family to an exit code."""


class SeaterraError(Exception):
    exit_code = 1


class ConfigError(SeaterraError, ValueError):
    """Bad configuration, arguments or usage."""

    exit_code = 2


class DataError(SeaterraError, ValueError):
    """Input data is missing, malformed or inconsistent."""

    exit_code = 3


class NumericalError(SeaterraError, ArithmeticError):
    exit_code = 4


class DivergedTrainingError(NumericalError):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss
