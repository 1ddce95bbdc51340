"""Sketch animation on a tiny raster diffusion model.

The package turns one 16x16 line drawing plus a motion phrase into a
short clip: the sketch is inverted through a deterministic sampler,
extra frames start as noise, and guided denoising pulls them toward the
sketch's appearance while the phrase drives the motion.
"""

from .errors import SketchAnimError

__version__ = "0.1.0"

__all__ = ["SketchAnimError", "__version__"]
