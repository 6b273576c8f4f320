"""Exception hierarchy for the streetsplat pipeline."""


class StreetSplatError(Exception):
    """Base class for all pipeline errors."""


class SchemaError(StreetSplatError):
    """A manifest, config, or serialized artifact is structurally malformed."""


class MissingAsset(StreetSplatError):
    """A file referenced by a manifest does not exist."""


class InvariantViolation(StreetSplatError):
    """Loaded or constructed data breaks a documented invariant."""


class IoError(StreetSplatError):
    """Filesystem read/write failed."""


class OutOfRange(StreetSplatError):
    """A query time lies outside the span of the data it indexes."""


class UnknownObject(StreetSplatError):
    """An edit or lookup references an object id that is not in the scene."""


class ShapeMismatch(StreetSplatError):
    """Two arrays that must agree in shape do not."""


class TooSmall(StreetSplatError):
    """An input image is smaller than the operation's window."""


class NoValidPixels(StreetSplatError):
    """A masked loss received an all-false validity mask."""


class InvalidTarget(StreetSplatError):
    """A crop/resize target is geometrically impossible for the source."""


class BehindCamera(StreetSplatError):
    """A point required to be in front of the camera is not."""


class DegenerateTrajectory(StreetSplatError):
    """A camera trajectory has no usable heading (all positions coincide)."""


class GeneratorFailure(StreetSplatError):
    """The novel-view generator raised; wrapped and propagated."""


class NonFiniteLoss(StreetSplatError):
    """Training produced a NaN/Inf loss; aborted with diagnostics."""


class InvalidScale(StreetSplatError):
    """A noise scale is outside [0, 1]."""


class InvalidChunking(StreetSplatError):
    """A long-video chunking request is inconsistent (e.g. fewer frames than one chunk)."""
