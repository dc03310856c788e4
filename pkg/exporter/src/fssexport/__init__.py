"""Export zoo-backbone features of real images into FTNS/FMSK + manifest."""

from .backbones import BackboneError, available, build
from .export import ExportError, ExportJob, downsample_mask, export
from .formats import (FormatError, read_feature_file, read_mask_file,
                      write_feature_file, write_mask_file)

__all__ = [
    "BackboneError",
    "ExportError",
    "ExportJob",
    "FormatError",
    "available",
    "build",
    "downsample_mask",
    "export",
    "read_feature_file",
    "read_mask_file",
    "write_feature_file",
    "write_mask_file",
]
