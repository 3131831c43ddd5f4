"""Exception types shared across the package."""


class UgssError(Exception):
    """Base class for package-specific failures."""


class ValidationError(UgssError, ValueError):
    """A record or configuration violates a documented invariant."""


class ContainerError(UgssError):
    """On-disk scan container is unreadable or inconsistent."""


class ChecksumError(ContainerError):
    """Stored checksum does not match the bytes on disk."""


class FormatError(ContainerError):
    """Unknown container version, dtype descriptor, or malformed layout."""


class LandmarkError(UgssError):
    """An anatomical landmark required by cleaning is unavailable."""


class ConfigError(UgssError, ValueError):
    """A user-supplied configuration value is invalid."""
