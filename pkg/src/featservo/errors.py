"""Exception hierarchy shared across the toolkit."""


class FeatServoError(Exception):
    """Base class for all toolkit errors."""


class NonPositiveDepth(FeatServoError):
    """A point at or behind the camera plane cannot be projected."""


class DimensionMismatch(FeatServoError):
    """Paired vectors/matrices disagree on feature count."""


class InsufficientFeatures(FeatServoError):
    """Fewer than 3 correspondences: the twist is unconstrained (2k < 6)."""


class DetectorUnavailable(FeatServoError):
    """The configured feature detector cannot produce output."""


class ParseError(FeatServoError):
    """Malformed feature-exchange record; message carries line/field info."""


class SchemaVersionMismatch(FeatServoError):
    """Feature file written with an unsupported schema version."""


class TooFewCorrespondences(FeatServoError):
    """Not enough pairs to seed the robust model fit."""


class TrackingLost(FeatServoError):
    """Tracked inliers dropped below the minimum; caller falls back to full matching."""


class EmptySet(FeatServoError):
    """Statistic requested over an empty collection."""


class TooFewVisibleLandmarks(FeatServoError):
    """Target render sees fewer than 3 object landmarks."""


class ConfigError(FeatServoError):
    """Invalid or unknown experiment configuration entry."""
