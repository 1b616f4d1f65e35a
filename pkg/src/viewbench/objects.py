"""Registry of benchmark objects and their lazily built derived assets."""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import TriangleMesh, load_mesh, make_synthetic, normalize_mesh
from .geometry.raycast import RayAccelerator
from .geometry.voxel import (SurfacePatches, SurfacePointCloud, SurfaceVoxelGrid, sample_surface_points,
                             surface_patches, voxelize_surface)

GT_POINTS = 30000
GT_SEED = 0
MESH_SUFFIXES = (".obj", ".ply")


class UnknownObject(KeyError):
    pass


@dataclass
class ObjectAssets:
    """Normalized geometry of one object plus cached derived data (read-only once built)."""
    object_id: str
    mesh: TriangleMesh
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _acc: RayAccelerator | None = None
    _grids: dict = field(default_factory=dict)
    _patches: dict = field(default_factory=dict)
    _gt: SurfacePointCloud | None = None

    @property
    def fingerprint(self) -> str:
        return self.mesh.fingerprint()

    @property
    def accelerator(self) -> RayAccelerator:
        with self._lock:
            if self._acc is None:
                self._acc = RayAccelerator(self.mesh)
            return self._acc

    def surface_grid(self, r: float) -> SurfaceVoxelGrid:
        with self._lock:
            if r not in self._grids:
                self._grids[r] = voxelize_surface(self.mesh, r)
            return self._grids[r]

    def patches(self, r: float) -> SurfacePatches:
        svg = self.surface_grid(r)
        with self._lock:
            if r not in self._patches:
                self._patches[r] = surface_patches(self.mesh, svg)
            return self._patches[r]

    @property
    def gt_points(self) -> SurfacePointCloud:
        with self._lock:
            if self._gt is None:
                self._gt = sample_surface_points(self.mesh, GT_POINTS, GT_SEED)
            return self._gt


class ObjectStore:
    """Maps object ids to hidden geometry. Registration normalizes every mesh."""

    def __init__(self):
        self._objects: dict[str, ObjectAssets] = {}
        self._lock = threading.Lock()

    def __contains__(self, object_id):
        return object_id in self._objects

    def __len__(self):
        return len(self._objects)

    def ids(self) -> list[str]:
        return sorted(self._objects)

    def add_mesh(self, object_id: str, mesh: TriangleMesh) -> ObjectAssets:
        norm, _ = normalize_mesh(mesh)
        assets = ObjectAssets(object_id, norm)
        with self._lock:
            self._objects[object_id] = assets
        return assets

    def add_file(self, path, object_id: str | None = None) -> ObjectAssets:
        path = Path(path)
        return self.add_mesh(object_id or path.stem, load_mesh(path))

    def add_synthetic(self, object_id: str, kind: str, **params) -> ObjectAssets:
        return self.add_mesh(object_id, make_synthetic(kind, **params))

    def add_directory(self, directory) -> list[tuple[str, str]]:
        """Register every OBJ/PLY file; returns (file, error) pairs for unreadable ones."""
        failures = []
        for path in sorted(Path(directory).iterdir()):
            if path.suffix.lower() not in MESH_SUFFIXES:
                continue
            try:
                self.add_file(path)
            except Exception as exc:  # reported per file, the batch continues
                failures.append((path.name, str(exc)))
        return failures

    def get(self, object_id: str) -> ObjectAssets:
        try:
            return self._objects[object_id]
        except KeyError:
            raise UnknownObject(object_id) from None


def synthetic_suite() -> ObjectStore:
    store = ObjectStore()
    for kind in ("sphere", "cube", "torus", "open_box"):
        store.add_synthetic(kind, kind)
    return store


def direction_key(d: np.ndarray) -> bytes:
    return np.ascontiguousarray(d, dtype=np.float64).tobytes()
