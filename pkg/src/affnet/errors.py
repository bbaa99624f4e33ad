class AffNetError(Exception):
    """Base class for library errors."""


class ContractError(AffNetError, ValueError):
    """An argument violates an operation's shape or value contract."""


class GeometryError(AffNetError, ValueError):
    """Spatial extents are invalid (non-positive outputs, mismatched maps, boxes off-frame)."""


class DegenerateLandmarksError(GeometryError):
    pass


class NonFiniteError(AffNetError, FloatingPointError):
    """A forward value or loss became NaN/Inf."""

    def __init__(self, message, op=None):
        super().__init__(message)
        self.op = op


class TiePointExcluded(AffNetError):
    """Finite differences straddle a max-pool tie or ReLU kink; the derivative is undefined there."""


class ManifestError(AffNetError, ValueError):
    pass
