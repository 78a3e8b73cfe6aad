"""Exception types shared across the package.

Callers can rely on the split: ContractViolation and SceneError mean the
input was bad (CLI exit code 2), DivergenceError and friends mean the
computation itself went wrong (exit code 3).
"""


class ContractViolation(ValueError):
    """An argument violated a documented precondition."""


class SceneError(ValueError):
    """Base class for problems in scene inputs (manifest, masks, styles)."""


class ManifestError(SceneError):
    """scene.json is missing, unreadable, or structurally wrong."""


class MissingImageError(SceneError):
    """A frame references an image file that does not exist."""


class PoseError(SceneError):
    """A camera pose is malformed (shape, orthonormality, or handedness)."""


class DimensionMismatchError(SceneError):
    """Frames or masks disagree about image dimensions."""


class MaskLayoutError(SceneError):
    """The mask directory or its sidecar does not follow the layout."""


class StyleConfigError(SceneError):
    """A style rule set is malformed or references unknown objects."""


class CheckpointError(ValueError):
    """A binary artifact (checkpoint, weights, features) failed to parse."""


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss; the run is aborted."""
