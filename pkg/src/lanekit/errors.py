"""Exception types shared across the toolkit."""


class LanekitError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(LanekitError):
    """Array shapes are incompatible for the requested operation."""


class FormatError(LanekitError):
    """A serialized file is malformed (bad magic, truncation, bad header)."""


class IntegrityError(LanekitError):
    """Internal data is corrupt (e.g. pooling indices out of range)."""


class CodecError(LanekitError):
    """Input violates the affinity-codec contract."""


class EvalError(LanekitError):
    """Evaluation inputs are inconsistent or a metric is undefined."""


class SceneError(LanekitError):
    """A synthetic scene specification cannot be realized."""
