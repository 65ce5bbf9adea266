"""Voxel classification engine for anatomical segmentation of 3D volumes."""

__version__ = "0.1.0"

from .volume import Atlas, LabelVolume, Volume  # noqa: F401
