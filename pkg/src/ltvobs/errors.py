"""Exception hierarchy shared by all ltvobs modules."""


class LtvError(Exception):
    """Base class for every error raised by ltvobs."""


class DimensionError(LtvError, ValueError):
    pass


class ConfigError(LtvError, ValueError):
    pass


class SmoothnessError(LtvError):
    """A derivative was requested beyond the declared smoothness order."""


class NumericError(LtvError):
    pass


class IntegrationDiverged(NumericError):
    def __init__(self, time, message="non-finite state during integration"):
        super().__init__(f"{message} at t={time:.17g}")
        self.time = time


class CovarianceCollapse(NumericError):
    def __init__(self, time, min_eig):
        super().__init__(
            f"Riccati matrix lost positive definiteness at t={time:.17g} "
            f"(min eigenvalue {min_eig:.3e})"
        )
        self.time = time
        self.min_eig = min_eig


class ObserverDiverged(IntegrationDiverged):
    def __init__(self, time):
        super().__init__(time, "non-finite observer estimate")
