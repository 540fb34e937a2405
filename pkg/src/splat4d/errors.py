"""Exception types raised across the package."""


class Splat4DError(Exception):
    """Base class for all package errors."""


class AngleNearPi(Splat4DError):
    """Rotation logarithm requested too close to the pi singularity."""


class EmptyInsertion(Splat4DError):
    """No valid masked pixels were available for surfel insertion."""


class EmptyMask(Splat4DError):
    """A loss was evaluated over an empty pixel mask."""


class EmptyGraph(Splat4DError):
    """Neighbor graph has no edges."""


class MissingRecord(Splat4DError):
    """Backward pass requested but the render ran without recording."""


class MissingActivations(Splat4DError):
    """Warp-field backward requested without matching forward cache."""


class EmptyMap(Splat4DError):
    """Operation requires a non-empty Gaussian map."""


class DivergedTracking(Splat4DError):
    """Tracking loss blew up instead of converging."""


class InvalidSpec(Splat4DError):
    """Synthetic scene spec is malformed."""


class MissingFile(Splat4DError):
    """Expected sequence file is absent."""


class NoAssociations(Splat4DError):
    """No rgb/depth timestamp pairs survived association."""


class CorruptCheckpoint(Splat4DError):
    """Checkpoint magic, version, or size check failed."""


class EmptyTrajectory(Splat4DError):
    """Trajectory operation on an empty trajectory."""


class NoMatches(Splat4DError):
    """No matched timestamps between two trajectories."""


class DegenerateConfiguration(Splat4DError):
    """Point configuration too degenerate for rigid alignment."""


class DimensionMismatch(Splat4DError):
    """Image or buffer dimensions disagree."""
