"""modaseg: cross-modality domain-adaptive segmentation at desk scale.

Two-step pipeline: unpaired cycle-consistent image translation to the target
modality, then adversarial output-space adaptation of a 2D U-Net with a
shape/texture/contour-aware patch discriminator and area-ratio checkpoint
selection. Built on numpy with numba-jitted hot kernels (see ``backend``).
"""

__version__ = "0.1.0"

from .backend import active_backend  # noqa: F401
