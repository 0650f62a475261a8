"""Dense-depth bundle adjustment fused with IMU, GNSS and wheel-speed data."""

from . import liegeom, errors

__all__ = ["liegeom", "errors"]
__version__ = "0.1.0"
