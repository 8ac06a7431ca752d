"""Exception hierarchy. The CLI maps each family to an exit code."""


class WetsegError(Exception):
    exit_code = 1
    category = "error"


class ConfigError(WetsegError, ValueError):
    exit_code = 2
    category = "config error"

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(WetsegError, ValueError):
    exit_code = 3
    category = "data error"


class RasterFormatError(DataError):
    pass


class ManifestError(DataError):
    pass


class CheckpointError(DataError):
    pass


class TransferError(WetsegError, ValueError):
    """Encoder weights cannot be moved between two models."""

    exit_code = 2
    category = "transfer error"


class NumericError(WetsegError, ArithmeticError):
    exit_code = 4
    category = "numeric failure"
