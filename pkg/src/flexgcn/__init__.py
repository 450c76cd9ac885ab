"""Two-hop flexible graph convolution for 2D-to-3D human pose lifting."""

from .numerics import Matrix, Tape

__version__ = "0.1.0"

__all__ = ["Matrix", "Tape", "__version__"]
