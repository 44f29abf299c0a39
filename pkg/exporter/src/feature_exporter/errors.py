"""Exporter error classes."""


class ExporterError(Exception):
    """Base class."""


class RetrievalError(ExporterError):
    """Pretrained model weights or their runtime are unavailable."""


class ExportError(ExporterError):
    """Extraction or serialization failed a self-check."""


class InputError(ExporterError, ValueError):
    """Bad manifest line, unreadable image, or invalid configuration."""
