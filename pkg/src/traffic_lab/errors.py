"""Exception hierarchy shared by all traffic_lab modules."""


class TrafficLabError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(TrafficLabError, ValueError):
    pass


class DomainError(TrafficLabError, ValueError):
    pass


class ContractError(TrafficLabError, ValueError):
    pass


class FormatError(TrafficLabError, ValueError):
    pass


class GenerationError(TrafficLabError, RuntimeError):
    pass


class SplitError(TrafficLabError, ValueError):
    pass


class SimulationError(TrafficLabError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class SelectionError(TrafficLabError, ValueError):
    pass


class ConfigError(TrafficLabError, ValueError):
    pass


class TrainingError(TrafficLabError, RuntimeError):
    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class MetricError(TrafficLabError, ValueError):
    pass
