"""Exporter error hierarchy."""


class ExportError(Exception):
    """Base class for all exporter failures."""


class JobValidationError(ExportError):
    """An export job or its inputs are malformed."""


class BackendUnavailableError(ExportError):
    """An encoder or generator backend cannot be loaded."""
