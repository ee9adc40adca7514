"""Bridge from image datasets to ULS1 embedding streams.

Encodes an image directory (or manifest) and a class-name list with a
frozen vision-language model into unit-norm float32 embeddings plus text
anchors, in the exact binary layout the streaming adaptation engine reads.
"""

from .encoders import ClipEncoder, StubEncoder, for_model
from .errors import ExporterError, InputError, SpecError
from .export import ExportResult, ExportSpec, build_anchors, export, light_augment
from .manifest import DatasetIndex, from_folders, from_manifest
from .uls_writer import Uls1Writer

__version__ = "0.1.0"

__all__ = [
    "ClipEncoder", "DatasetIndex", "ExportResult", "ExportSpec",
    "ExporterError", "InputError", "SpecError", "StubEncoder", "Uls1Writer",
    "build_anchors", "export", "for_model", "from_folders", "from_manifest",
    "light_augment",
]
