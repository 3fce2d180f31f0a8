"""Exception hierarchy. Each family maps to one CLI exit code."""


class CTStopError(Exception):
    exit_code = 4


class ConfigError(CTStopError):
    exit_code = 2


class DataError(CTStopError):
    exit_code = 3


class RuntimeFailure(CTStopError):
    exit_code = 4


# configuration
class UnknownKey(ConfigError, KeyError):
    def __init__(self, key: str, suggestion: str = None):
        self.key = key
        self.suggestion = suggestion
        msg = f"unknown config key '{key}'"
        if suggestion:
            msg += f"; did you mean '{suggestion}'?"
        super().__init__(msg)

    def __str__(self) -> str:
        return self.args[0]


class ConfigTypeError(ConfigError, TypeError):
    pass


class MissingRequired(ConfigError, ValueError):
    pass


class InvalidValue(ConfigError, ValueError):
    pass



# data: phantoms, scans, downloads
class SpecOutOfRange(DataError, ValueError):
    pass


class ShapeClipped(DataError, ValueError):
    pass


class NetworkError(DataError):
    pass


class ChecksumMismatch(DataError):
    pass


class MissingFlatField(DataError):
    pass


class GeometryMissing(DataError, ValueError):
    pass


# runtime: operators, environment, network, evaluation
class ShapeMismatch(RuntimeFailure, ValueError):
    pass


class DuplicateAngle(RuntimeFailure, ValueError):
    pass


class EmptyAngleSet(RuntimeFailure, ValueError):
    pass


class EmptySinogram(RuntimeFailure, ValueError):
    pass


class ZeroReference(RuntimeFailure, ValueError):
    pass


class AngleRepeated(RuntimeFailure, ValueError):
    pass


class EpisodeExhausted(RuntimeFailure):
    pass


class MissingTarget(RuntimeFailure, ValueError):
    pass


class ArchitectureMismatch(RuntimeFailure, ValueError):
    pass


class EmptyRunSet(RuntimeFailure, ValueError):
    pass
