"""Run pretrained vision encoders over image folders and write per-image
patch-feature tensors plus a rewritten manifest."""

from .encoders import ENCODER_SPECS, EncoderSpec, load_encoder
from .export import ExportError, ExportJob, run_export

__version__ = "0.1.0"

__all__ = [
    "ENCODER_SPECS",
    "EncoderSpec",
    "ExportError",
    "ExportJob",
    "load_encoder",
    "run_export",
]
