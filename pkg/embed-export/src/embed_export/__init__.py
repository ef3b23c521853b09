"""Image-folder to embedding-bank exporter.

Runs configured encoders (pretrained torchvision backbones when their
weights are available locally, deterministic projection encoders
otherwise) over an image directory and writes a dataset directory in the
bank format the fusionalign loader validates.
"""

from .encoders import PixelLatentEncoder, ProjectionEncoder, preprocess_image
from .export import BranchSpec, ExportError, ExportSpec, export_bank

__version__ = "0.1.0"

__all__ = [
    "BranchSpec",
    "ExportError",
    "ExportSpec",
    "PixelLatentEncoder",
    "ProjectionEncoder",
    "export_bank",
    "preprocess_image",
]
