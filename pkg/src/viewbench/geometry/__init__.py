from .mesh import (
    MeshError,
    NormalizationTransform,
    TriangleMesh,
    bounding_sphere,
    cleanup,
    load_mesh,
    normalize_mesh,
    save_obj,
    save_ply,
)
from .synthetic import make_synthetic
