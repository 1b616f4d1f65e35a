"""Triangle meshes: loading, cleanup, bounding-sphere normalization, export."""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

DEGENERATE_AREA = 1e-12


class MeshError(ValueError):
    pass


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise MeshError("non-finite vertex coordinates")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle index out of range")
        v.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def areas(self) -> np.ndarray:
        return triangle_areas(self.vertices, self.triangles)

    def corners(self) -> np.ndarray:
        """(m, 3, 3) array of triangle corner coordinates."""
        return self.vertices[self.triangles]

    def fingerprint(self) -> str:
        h = hashlib.sha1()
        h.update(self.vertices.tobytes())
        h.update(self.triangles.tobytes())
        return h.hexdigest()[:16]


def cleanup(vertices, triangles) -> TriangleMesh:
    """Drop triangles with area below DEGENERATE_AREA and unreferenced vertices."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if len(triangles):
        keep = triangle_areas(vertices, triangles) >= DEGENERATE_AREA
        triangles = triangles[keep]
    used, inverse = np.unique(triangles.ravel(), return_inverse=True)
    return TriangleMesh(vertices[used], inverse.reshape(-1, 3))


def weld(vertices, triangles, decimals: int = 9) -> TriangleMesh:
    """Merge coincident vertices (after rounding) and clean up."""
    vertices = np.asarray(vertices, dtype=np.float64)
    key = np.round(vertices, decimals) + 0.0  # +0.0 folds -0.0 into 0.0
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    return cleanup(vertices[first], np.asarray(inverse).ravel()[np.asarray(triangles)])


def merge(*meshes: TriangleMesh) -> TriangleMesh:
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


# ---------------------------------------------------------------------------
# loading

def _fan(face: list[int]) -> list[tuple[int, int, int]]:
    return [(face[0], face[i], face[i + 1]) for i in range(1, len(face) - 1)]


def _read_obj(path: str):
    verts, tris = [], []
    with open(path, "r", errors="replace") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                face = []
                for tok in parts[1:]:
                    idx = int(tok.split("/")[0])
                    face.append(idx - 1 if idx > 0 else len(verts) + idx)
                tris.extend(_fan(face))
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _read_ply(path: str):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise MeshError(f"{path}: not a PLY file")
        fmt = None
        elements = []  # (name, count, [(prop name, dtype) | (name, count dtype, item dtype)])
        while True:
            line = fh.readline()
            if not line:
                raise MeshError(f"{path}: truncated PLY header")
            parts = line.decode("ascii", "replace").split()
            if not parts:
                continue
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                elements.append((parts[1], int(parts[2]), []))
            elif parts[0] == "property":
                if parts[1] == "list":
                    elements[-1][2].append((parts[4], _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
                else:
                    elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
            elif parts[0] == "end_header":
                break
        body = fh.read()

    verts = np.zeros((0, 3))
    tris: list = []
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = {}
                for prop in props:
                    if len(prop) == 3:
                        n = int(tokens[pos]); pos += 1
                        row[prop[0]] = [int(float(x)) for x in tokens[pos:pos + n]]
                        pos += n
                    else:
                        row[prop[0]] = float(tokens[pos]); pos += 1
                rows.append(row)
            if name == "vertex":
                verts = np.array([[r["x"], r["y"], r["z"]] for r in rows], dtype=np.float64).reshape(-1, 3)
            elif name == "face":
                for r in rows:
                    face = r.get("vertex_indices", r.get("vertex_index"))
                    tris.extend(_fan(face))
    elif fmt in ("binary_little_endian", "binary_big_endian"):
        end = "<" if fmt == "binary_little_endian" else ">"
        pos = 0
        for name, count, props in elements:
            if all(len(p) == 2 for p in props):
                dt = np.dtype([(p[0], end + p[1]) for p in props])
                arr = np.frombuffer(body, dtype=dt, count=count, offset=pos)
                pos += dt.itemsize * count
                if name == "vertex":
                    verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
                continue
            for _ in range(count):
                row = {}
                for prop in props:
                    if len(prop) == 3:
                        cdt = np.dtype(end + prop[1])
                        n = int(np.frombuffer(body, cdt, 1, pos)[0]); pos += cdt.itemsize
                        idt = np.dtype(end + prop[2])
                        row[prop[0]] = np.frombuffer(body, idt, n, pos).astype(np.int64).tolist()
                        pos += idt.itemsize * n
                    else:
                        dt = np.dtype(end + prop[1])
                        row[prop[0]] = np.frombuffer(body, dt, 1, pos)[0]; pos += dt.itemsize
                if name == "face":
                    tris.extend(_fan(row.get("vertex_indices", row.get("vertex_index"))))
    else:
        raise MeshError(f"{path}: unsupported PLY format {fmt!r}")
    return verts, np.array(tris, dtype=np.int64).reshape(-1, 3)


def load_mesh(path) -> TriangleMesh:
    """Read an OBJ or PLY file; polygons are fan-triangulated."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise MeshError(f"{path}: no such file")
    ext = os.path.splitext(path)[1].lower()
    try:
        if ext == ".obj":
            verts, tris = _read_obj(path)
        elif ext == ".ply":
            verts, tris = _read_ply(path)
        else:
            raise MeshError(f"{path}: unsupported extension {ext!r}")
    except (OSError, UnicodeDecodeError, IndexError, KeyError, struct.error, ValueError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"{path}: unreadable mesh ({exc})") from exc
    mesh = cleanup(verts, tris)
    if mesh.n_triangles == 0:
        raise MeshError(f"{path}: no triangles after cleanup")
    return mesh


def save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for t in mesh.triangles + 1:
            fh.write(f"f {t[0]} {t[1]} {t[2]}\n")


def save_ply(mesh: TriangleMesh, path, binary: bool = True) -> None:
    header = (
        "ply\n"
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        f"element face {mesh.n_triangles}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(mesh.vertices.astype("<f8").tobytes())
            face = np.zeros(mesh.n_triangles, dtype=[("n", "u1"), ("i", "<i4", (3,))])
            face["n"] = 3
            face["i"] = mesh.triangles
            fh.write(face.tobytes())
        else:
            for x, y, z in mesh.vertices.tolist():
                fh.write(f"{x!r} {y!r} {z!r}\n".encode())
            for t in mesh.triangles:
                fh.write(f"3 {t[0]} {t[1]} {t[2]}\n".encode())


# ---------------------------------------------------------------------------
# normalization

@dataclass(frozen=True)
class NormalizationTransform:
    """Maps raw coordinates x to (x + translation) * uniform_scale."""
    translation: tuple[float, float, float]
    uniform_scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) + np.asarray(self.translation)) * self.uniform_scale

    def inverse(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.uniform_scale - np.asarray(self.translation)


def _circumsphere(pts: list[np.ndarray]):
    if len(pts) == 0:
        return np.zeros(3), -1.0
    if len(pts) == 1:
        return pts[0].copy(), 0.0
    a = pts[0]
    if len(pts) == 2:
        c = 0.5 * (a + pts[1])
        return c, float(np.linalg.norm(pts[1] - c))
    # center = a + sum_k lam_k (p_k - a), solving the equidistance system in the span
    d = np.array([p - a for p in pts[1:]])
    g = d @ d.T
    rhs = 0.5 * np.einsum("ij,ij->i", d, d)
    try:
        lam = np.linalg.solve(g, rhs)
    except np.linalg.LinAlgError:
        lam = np.linalg.lstsq(g, rhs, rcond=None)[0]
    c = a + lam @ d
    return c, float(np.linalg.norm(a - c))


def bounding_sphere(points: np.ndarray, seed: int = 0):
    """Minimal enclosing sphere (Welzl, move-to-front) of a point set."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) >= 5:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except QhullError:
            pass  # coplanar input, run on all points
    pts = pts[np.random.default_rng(seed).permutation(len(pts))]
    eps = 1e-12

    def inside(c, r, p):
        return r >= 0 and np.linalg.norm(p - c) <= r * (1 + eps) + eps

    def mtf(n, support):
        c, r = _circumsphere(support)
        if len(support) == 4:
            return c, r
        for i in range(n):
            if not inside(c, r, pts[i]):
                c, r = mtf(i, support + [pts[i]])
        return c, r

    c, r = mtf(len(pts), [])
    return c, r


def normalize_mesh(mesh: TriangleMesh) -> tuple[TriangleMesh, NormalizationTransform]:
    """Center the bounding sphere at the origin and scale its radius to 1."""
    if mesh.n_triangles == 0:
        raise MeshError("empty mesh")
    center, radius = bounding_sphere(mesh.vertices)
    if radius <= 1e-12:
        raise MeshError("degenerate mesh: all vertices coincide")
    xf = NormalizationTransform(tuple(float(x) for x in -center), 1.0 / radius)
    return cleanup(xf.apply(mesh.vertices), mesh.triangles), xf
