"""Exception types raised across the package.

Everything user-facing derives from :class:`GBlendError` so the CLI can
distinguish expected input problems (exit code 1) from genuine bugs
(exit code 2).
"""

from __future__ import annotations


class GBlendError(Exception):
    """Base class for all expected, user-actionable errors."""


class ValidationError(GBlendError):
    """Invalid argument shapes, counts, or values."""


class AssetError(GBlendError):
    """Base class for file format problems."""


class BadMagicError(AssetError):
    """File does not start with the expected magic bytes."""


class VersionError(AssetError):
    """File declares an unsupported format version."""


class TruncatedFileError(AssetError):
    """File ends before the declared payload is complete."""


class CountMismatchError(AssetError):
    """Declared counts are inconsistent with the payload or with each other."""
