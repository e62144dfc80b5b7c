"""bonefield: deformable human-object radiance fields on synthetic scenes."""

__version__ = "0.1.0"

from .backend import backend_name
