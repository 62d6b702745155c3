"""Shared exception types."""


class DegenerateProblemError(RuntimeError):
    """Raised when a solve or metric has no usable data (e.g. fully masked)."""


class DatasetError(RuntimeError):
    """Raised for unreadable, missing or inconsistent dataset files."""


class ConfigError(ValueError):
    """Raised for invalid or unknown configuration content."""
