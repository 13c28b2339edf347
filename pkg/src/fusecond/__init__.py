"""Multi-image token fusion, attention alignment, and enhanced sampling
over sparse voxel latents."""

from .voxels import KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
