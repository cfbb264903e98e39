class UavSimError(Exception):
    """Base for every error raised by the simulator and trainers."""


class ConfigError(UavSimError, ValueError):
    def __init__(self, message: str, fields: list[str] | None = None):
        super().__init__(message)
        self.fields = fields or []


class EpisodeStateError(UavSimError, RuntimeError):
    pass


class ChannelDomainError(UavSimError, ValueError):
    pass


class ShapeError(UavSimError, ValueError):
    pass


class TapeError(UavSimError, RuntimeError):
    pass


class NonFiniteError(UavSimError, FloatingPointError):
    pass


class OracleBoundsError(UavSimError, ValueError):
    pass


class CheckpointMismatchError(UavSimError, ValueError):
    pass
