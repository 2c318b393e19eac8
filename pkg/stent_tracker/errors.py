"""Exception types raised by the stent tracker library."""


class StentTrackerError(Exception):
    """Base class for every error the library raises on purpose"""


class ConfigError(StentTrackerError, ValueError):
    """A configuration key is unknown or its value cannot be used"""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class TrajectoryError(ConfigError):
    """The simulated stent trajectory leaves the frame"""


class FormatError(StentTrackerError, ValueError):
    """A file on disk does not follow the expected format"""

    def __init__(self, path, field, message):
        self.path = str(path)
        self.field = field
        super().__init__(f"{self.path}: {field}: {message}")


class DimensionError(StentTrackerError, ValueError):
    """Array or parameter shapes do not agree"""


class DatasetError(StentTrackerError, ValueError):
    """Training data is empty or has a single class"""


class RegistrationError(StentTrackerError, ValueError):
    """Point correspondences do not determine a transform"""
