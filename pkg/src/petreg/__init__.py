"""Multimodal (PET to MRI) 3D registration with sigmoid-assisted PCA initialisation."""
import numba as _numba

# The bundled TBB is too old for numba; use the portable pool.
_numba.config.THREADING_LAYER = "workqueue"

from .volume import BoundingBox, Volume, extract_voi, load_metaimage, save_metaimage  # noqa: E402

__all__ = ["BoundingBox", "Volume", "extract_voi", "load_metaimage", "save_metaimage"]
__version__ = "0.1.0"
