"""Feature-pyramid exporter: pretrained-encoder activations to FPYR files."""

from .export import DEFAULT_MODEL_ID, ExportConfig, export
from .errors import ExportError, InputError, RetrievalError

__all__ = [
    "DEFAULT_MODEL_ID",
    "ExportConfig",
    "ExportError",
    "InputError",
    "RetrievalError",
    "export",
]
__version__ = "0.1.0"
