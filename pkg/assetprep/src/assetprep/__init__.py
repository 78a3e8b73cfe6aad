"""Asset preparation for the voxel stylization pipeline.

Everything this tool makes leaves through files: S2FW weight chains
with JSON manifests, S2FM reference activations, and the per-object
mask layout. Nothing here imports the consumer; the file formats are
the whole interface.
"""

__version__ = "0.1.0"

from .detect import ClassicalBackend, Detection, NeuralBackend, make_backend
from .errors import ContractViolation, FormatError, ModelError
from .export import ExportManifest, export_reference_features, export_weights
from .masks import gen_masks, link_frames
from .vgg import ARCHITECTURE, DEFAULT_LAYERS, DEFAULT_TAPS, LAYER_NAMES

__all__ = [
    "__version__",
    "ARCHITECTURE",
    "LAYER_NAMES",
    "DEFAULT_LAYERS",
    "DEFAULT_TAPS",
    "ExportManifest",
    "export_weights",
    "export_reference_features",
    "gen_masks",
    "link_frames",
    "Detection",
    "ClassicalBackend",
    "NeuralBackend",
    "make_backend",
    "ContractViolation",
    "FormatError",
    "ModelError",
]
