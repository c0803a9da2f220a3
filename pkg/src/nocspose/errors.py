"""Exception types raised across the pipeline."""


class NocsPoseError(Exception):
    """Base class for all library errors."""


class NonPositiveDepth(NocsPoseError):
    """A point at or behind the camera plane was projected."""


class EmptyMesh(NocsPoseError):
    pass


class ShapeMismatch(NocsPoseError):
    pass


class DegenerateConfiguration(NocsPoseError):
    """Too few or degenerate correspondences for a pose solve."""


class InsufficientInliers(NocsPoseError):
    """RANSAC could not find a hypothesis supported by enough inliers."""


class MeshNotVisible(NocsPoseError):
    """The mesh has zero coverage under the initial pose."""


class EmptyCandidates(NocsPoseError):
    pass


class LengthMismatch(NocsPoseError):
    pass


class ZeroFirstTranslation(NocsPoseError):
    """The first predicted translation is zero, so scale normalization is undefined."""


class TooFewPoints(NocsPoseError):
    pass


class InvalidSpec(NocsPoseError):
    pass
