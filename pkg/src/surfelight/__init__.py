"""Two-stage outdoor inverse rendering on 2D Gaussian surfels.

Stage 1 reconstructs scene geometry as oriented Gaussian disks (surfels) with a
per-image appearance transform absorbing illumination changes.  Stage 2 freezes
the geometry and decomposes each image's illumination into a spherical-Gaussian
sun plus a second-order spherical-harmonic sky, with per-surfel albedo and
radiance-transfer coefficients, enabling relighting with ray-traced shadows.
"""

__version__ = "0.1.0"

from .camera import Camera
from .scene import (
    ActivatedSurfels,
    GBuffer,
    LightingEnvironment,
    SurfelModel,
    TrainingFrame,
)

__all__ = [
    "Camera",
    "ActivatedSurfels",
    "GBuffer",
    "LightingEnvironment",
    "SurfelModel",
    "TrainingFrame",
    "__version__",
]
