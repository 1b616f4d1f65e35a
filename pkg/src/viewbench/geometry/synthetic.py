"""Procedural test objects: sphere, cube, torus and a thick-walled box with a top aperture."""
from __future__ import annotations

import numpy as np

from .mesh import MeshError, TriangleMesh, normalize_mesh, weld

SHAPES = ("sphere", "cube", "torus", "open_box")


def icosphere(level: int) -> TriangleMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(level):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriangleMesh(np.array(verts), np.array(faces))


def _grid_quads(us, vs, emit, skip=None):
    """Triangulate the rectangle grid us x vs; emit(u, v) maps to 3D."""
    tris = []
    for i in range(len(us) - 1):
        for j in range(len(vs) - 1):
            if skip is not None and skip(0.5 * (us[i] + us[i + 1]), 0.5 * (vs[j] + vs[j + 1])):
                continue
            p00, p10 = emit(us[i], vs[j]), emit(us[i + 1], vs[j])
            p11, p01 = emit(us[i + 1], vs[j + 1]), emit(us[i], vs[j + 1])
            tris.append((p00, p10, p11))
            tris.append((p00, p11, p01))
    return tris


def _box_surface(xs, ys, zs, hole=None, inward=False):
    """Six faces of the box spanned by the coordinate lines; `hole` cuts the +z face."""
    x0, x1, y0, y1, z0, z1 = xs[0], xs[-1], ys[0], ys[-1], zs[0], zs[-1]
    tris = []
    tris += _grid_quads(xs, ys, lambda u, v: (u, v, z1), skip=hole)
    tris += [t[::-1] for t in _grid_quads(xs, ys, lambda u, v: (u, v, z0))]
    tris += _grid_quads(ys, zs, lambda u, v: (x1, u, v))
    tris += [t[::-1] for t in _grid_quads(ys, zs, lambda u, v: (x0, u, v))]
    tris += [t[::-1] for t in _grid_quads(xs, zs, lambda u, v: (u, y1, v))]
    tris += _grid_quads(xs, zs, lambda u, v: (u, y0, v))
    if inward:
        tris = [t[::-1] for t in tris]
    return tris


def _from_triangle_soup(tris) -> TriangleMesh:
    pts = np.array(tris, dtype=np.float64).reshape(-1, 3)
    return weld(pts, np.arange(len(pts)).reshape(-1, 3))


def cube(level: int = 8) -> TriangleMesh:
    lines = np.linspace(-1.0, 1.0, level + 1)
    return _from_triangle_soup(_box_surface(lines, lines, lines))


def torus(major: float = 0.7, minor: float = 0.3, level: int = 4) -> TriangleMesh:
    if not 0 < minor < major:
        raise MeshError("torus needs 0 < minor < major")
    nu, nv = 16 * level, 8 * level
    u = 2 * np.pi * np.arange(nu) / nu
    v = 2 * np.pi * np.arange(nv) / nv
    uu, vv = np.meshgrid(u, v, indexing="ij")
    ring = major + minor * np.cos(vv)
    verts = np.stack([ring * np.cos(uu), ring * np.sin(uu), minor * np.sin(vv)], axis=-1).reshape(-1, 3)
    tris = []
    for i in range(nu):
        for j in range(nv):
            a = i * nv + j
            b = ((i + 1) % nu) * nv + j
            c = ((i + 1) % nu) * nv + (j + 1) % nv
            d = i * nv + (j + 1) % nv
            tris += [(a, b, c), (a, c, d)]
    return TriangleMesh(verts, np.array(tris))


def open_box(wall: float = 0.2, opening: float = 0.6, level: int = 4) -> TriangleMesh:
    """Box (outer half-size 1) with a square aperture centered in the top face.

    With wall > 0 the walls are solid: the cavity surfaces sit `wall` inside
    the outer ones and the aperture is a tunnel as deep as the wall, so the
    mesh stays closed. wall == 0 gives a single sheet whose aperture rim is
    the only boundary loop.
    """
    inner = 1.0 - wall
    if not 0 <= wall < 1:
        raise MeshError("wall thickness must lie in [0, 1)")
    if not 0 < opening < 2 * inner:
        raise MeshError("opening must be positive and narrower than the cavity")
    h = opening / 2
    n = max(2, level)
    hole_lines = np.linspace(-h, h, n + 1)

    def lines(extent):
        side = np.linspace(-extent, -h, n + 1)
        return np.concatenate([side, hole_lines[1:-1], -side[::-1]])

    def in_hole(u, v):
        return abs(u) < h and abs(v) < h

    full = np.linspace(-1.0, 1.0, 2 * n + 1)
    cav = np.linspace(-inner, inner, 2 * n + 1)
    tris = _box_surface(lines(1.0), lines(1.0), full, hole=in_hole)
    if wall == 0:
        return _from_triangle_soup(tris)
    tris += _box_surface(lines(inner), lines(inner), cav, hole=in_hole, inward=True)
    # aperture walls between the two holes
    zs = np.linspace(inner, 1.0, max(2, n // 2) + 1)
    tris += _grid_quads(hole_lines, zs, lambda u, v: (u, h, v))
    tris += [t[::-1] for t in _grid_quads(hole_lines, zs, lambda u, v: (u, -h, v))]
    tris += [t[::-1] for t in _grid_quads(hole_lines, zs, lambda u, v: (h, u, v))]
    tris += _grid_quads(hole_lines, zs, lambda u, v: (-h, u, v))
    return _from_triangle_soup(tris)


def make_synthetic(kind: str, **params) -> TriangleMesh:
    """Build a normalized synthetic mesh: sphere(level), cube(level),
    torus(major, minor, level) or open_box(wall, opening, level)."""
    if kind == "sphere":
        raw = icosphere(int(params.get("level", 4)))
    elif kind == "cube":
        raw = cube(int(params.get("level", 8)))
    elif kind == "torus":
        raw = torus(float(params.get("major", 0.7)), float(params.get("minor", 0.3)), int(params.get("level", 4)))
    elif kind == "open_box":
        raw = open_box(float(params.get("wall", 0.2)), float(params.get("opening", 0.6)), int(params.get("level", 4)))
    else:
        raise MeshError(f"unknown synthetic shape {kind!r}")
    return normalize_mesh(raw)[0]


def edges(mesh: TriangleMesh) -> np.ndarray:
    e = np.concatenate([mesh.triangles[:, [0, 1]], mesh.triangles[:, [1, 2]], mesh.triangles[:, [2, 0]]])
    return np.sort(e, axis=1)


def boundary_edges(mesh: TriangleMesh) -> np.ndarray:
    e, counts = np.unique(edges(mesh), axis=0, return_counts=True)
    return e[counts == 1]


def euler_characteristic(mesh: TriangleMesh) -> int:
    n_edges = len(np.unique(edges(mesh), axis=0))
    return len(mesh.vertices) - n_edges + mesh.n_triangles
