"""Exception types shared across the estimation pipeline."""


class DenseVioError(Exception):
    """Base class for all library errors."""


class NonPositiveDepth(DenseVioError):
    """Point depth at or below the minimum usable depth."""


class InvalidInverseDepth(DenseVioError):
    """Inverse depth below the minimum representable value."""


class MixedAnchor(DenseVioError):
    """Edge bundle contains edges with different source frames."""


class IndexOutOfWindow(DenseVioError):
    """A factor or constraint references a state outside the window."""


class Degenerate(DenseVioError):
    """System is rank-deficient beyond its gauge freedoms."""


class EmptyBatch(DenseVioError):
    """IMU batch holds fewer than two samples."""


class NonMonotonicTime(DenseVioError):
    """IMU timestamps are not strictly increasing."""


class TimeMismatch(DenseVioError):
    """Preintegration span does not match the epoch gap."""


class GapTooLarge(DenseVioError):
    """Dead-reckoning interval exceeds the configured maximum."""


class NotAligned(DenseVioError):
    """GNSS factor added before the world-to-navigation alignment."""


class SingularSystem(DenseVioError):
    """Normal equations are singular beyond tolerance."""


class DanglingFactor(DenseVioError):
    """A factor still references a state slated for removal."""


class NotInitialized(DenseVioError):
    """Pipeline used before visual-inertial initialization."""


class InsufficientExcitation(DenseVioError):
    """Motion does not make the monocular scale observable."""


class DegenerateGeometry(DenseVioError):
    """Trajectory geometry too poor for alignment."""


class ParseError(DenseVioError):
    """Malformed config or CSV input."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc += f"{path}"
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = path
        self.line = line


class MissingField(DenseVioError):
    """Required config field absent."""


class TooFewPairs(DenseVioError):
    """Not enough associated pose pairs for ATE."""


class TrajectoryTooShort(DenseVioError):
    """Trajectory shorter than the largest RPE segment."""
