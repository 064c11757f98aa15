"""Exception types shared across the package."""


class ModasegError(Exception):
    """Base class for package errors."""


class ValidationError(ModasegError):
    """Input data violates a documented invariant."""


class ShapeError(ModasegError):
    """Array shape incompatible with an operation's contract."""


class ConfigError(ModasegError):
    """Invalid or inconsistent configuration."""


class MissingArtifactError(ModasegError):
    """A pipeline stage's declared predecessor artifact does not exist."""


class ConfigHashError(ModasegError):
    """Artifact was produced under a different configuration hash."""


class DegenerateStatsError(ModasegError):
    """Statistics too degenerate to score (e.g. zero mean class area)."""


class EmptyMaskError(ModasegError):
    """Surface-distance metrics are undefined for an empty mask."""
