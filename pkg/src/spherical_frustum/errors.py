"""Exception types raised across the package."""


class FrustumError(Exception):
    """Base class for all package errors."""


class ZeroRangePoint(FrustumError):
    def __init__(self, index):
        self.index = int(index)
        super().__init__(f"point {self.index} has zero range; azimuth/elevation undefined")


class OutOfBounds(FrustumError):
    def __init__(self, index):
        self.index = int(index)
        super().__init__(f"point {self.index} projects outside the grid")


class EmptyCloud(FrustumError):
    pass


class KeyOverflow(FrustumError):
    pass


class CorruptIndicator(FrustumError):
    pass


class ShapeMismatch(FrustumError):
    pass


class BadCount(FrustumError):
    pass


class BadLabel(FrustumError):
    pass


class MalformedScan(FrustumError):
    pass


class MalformedLabels(FrustumError):
    pass


class CountMismatch(FrustumError):
    pass


class BadSpec(FrustumError):
    pass


class ConfigError(FrustumError):
    pass
