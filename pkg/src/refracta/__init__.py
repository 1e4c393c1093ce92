"""refracta: multi-view reconstruction of transparent objects.

From a few calibrated images, segmentation masks, and a known distant
environment map, the pipeline carves a visual hull, estimates per-view
first/second-surface normals through a two-bounce refractive rendering
layer (cost-volume search plus gradient refinement), fuses the per-view
estimates onto the hull, and recovers the final surface by Poisson
reconstruction or normal-driven deformation.
"""

__version__ = "0.1.0"

from .backend import active_backend, set_backend, set_threads  # noqa: F401
