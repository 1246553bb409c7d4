"""adapterforge: residual adapters for a toy segmentation U-Net.

Train small per-layer correction modules on a new visual domain while the
backbone stays frozen, rank them by average magnitude per parameter, ship
only the useful ones as a compact binary update, and fold them into the
host convolutions for inference at baseline cost.  Classic Otsu/Canny/hybrid
segmenters and a procedural Moon/Mars scene generator round out the toolbox.
"""

from .kernels import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
