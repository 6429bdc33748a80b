class FedFedError(ValueError):
    """
    Base class for every error raised by the simulator
    """


class DimensionError(FedFedError):
    pass


class DomainError(FedFedError):
    pass


class NumericError(FedFedError):
    """
    Raised on non-finite values, typically a diverging training loop. Callers should lower the learning rate.
    """


class FormatError(FedFedError):
    pass


class ConsistencyError(FedFedError):
    pass


class InfeasibleError(FedFedError):
    pass


class ProtocolError(FedFedError):
    pass


class ConfigError(FedFedError):
    """
    Configuration violation. `key` holds the dotted path of the offending entry, when known
    """

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key
