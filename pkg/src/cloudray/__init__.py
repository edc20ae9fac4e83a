"""cloudray: point-cloud ray casting with a learned cloud-ray intersection
operator, physically based path tracing, and inverse rendering."""

__version__ = "0.1.0"

from .cloud import PointCloud
from .geometry import CanonicalFrame, GroundTruthHit, Ray, canonicalize
from .grid import QueryConfig, brute_force_knn, build_grid, query_cylinder_knn
from .model import CloudRayModel, ModelConfig, init_params, load_checkpoint, save_checkpoint
from .raycast import SurfaceHit, cast_rays

__all__ = [
    "PointCloud", "CanonicalFrame", "GroundTruthHit", "Ray", "canonicalize",
    "QueryConfig", "brute_force_knn", "build_grid", "query_cylinder_knn",
    "CloudRayModel", "ModelConfig", "init_params", "load_checkpoint",
    "save_checkpoint", "SurfaceHit", "cast_rays", "__version__",
]
