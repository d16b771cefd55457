"""occudet: multi-camera voxel occupancy + BEV detection pipeline on procedural scenes.

Everything runs on plain numpy arrays (float32 training, float64 shadow mode for
gradient checking); backward passes are hand-written per operation.
"""

__version__ = "0.1.0"

from .ops import NonFiniteError, Param
from .geometry import CameraModel, Transform3D, VoxelGridSpec

__all__ = [
    "CameraModel",
    "NonFiniteError",
    "Param",
    "Transform3D",
    "VoxelGridSpec",
    "__version__",
]
