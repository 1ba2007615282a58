"""Exception types shared across the package."""


class EndoreconError(Exception):
    """Base class for all package-specific errors."""


class InputError(EndoreconError):
    """Invalid or inconsistent input data (files, manifests, configs)."""


class TrackingError(EndoreconError):
    """Pose tracking could not produce a usable estimate."""


class SurfaceError(EndoreconError):
    """Surface extraction produced no geometry."""
