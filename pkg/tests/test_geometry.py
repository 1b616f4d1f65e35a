import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linprog

from conftest import linear_scan, random_rotation
from viewbench.geometry import MeshError, TriangleMesh, load_mesh, make_synthetic, normalize_mesh, save_obj, save_ply
from viewbench.geometry.mesh import bounding_sphere, cleanup
from viewbench.geometry.raycast import RayAccelerator, ray_first_hit
from viewbench.geometry.synthetic import boundary_edges, cube, euler_characteristic, icosphere, open_box, torus
from viewbench.geometry.voxel import sample_surface_points, surface_patches, voxelize_surface


def write(path, text):
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# loading

def test_minimal_obj(tmp_path):
    m = load_mesh(write(tmp_path / "t.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n"))
    assert m.n_triangles == 1 and len(m.vertices) == 3


def test_quad_is_fan_triangulated(tmp_path):
    m = load_mesh(write(tmp_path / "q.obj", "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3 4/4/4\n"))
    assert m.n_triangles == 2


def test_negative_obj_indices(tmp_path):
    m = load_mesh(write(tmp_path / "n.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n"))
    assert m.triangles.tolist() == [[0, 1, 2]]


@pytest.mark.parametrize("binary", [True, False])
def test_obj_ply_roundtrip_agree(tmp_path, binary):
    m = cube(4)
    save_obj(m, tmp_path / "c.obj")
    save_ply(m, tmp_path / "c.ply", binary=binary)
    a, b = load_mesh(tmp_path / "c.obj"), load_mesh(tmp_path / "c.ply")
    assert (len(a.vertices), a.n_triangles) == (len(b.vertices), b.n_triangles) == (len(m.vertices), m.n_triangles)
    np.testing.assert_array_equal(a.vertices, b.vertices)
    np.testing.assert_array_equal(a.triangles, b.triangles)


def test_ply_quads(tmp_path):
    text = ("ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\n"
            "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
            "0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    assert load_mesh(write(tmp_path / "q.ply", text)).n_triangles == 2


def test_load_errors(tmp_path):
    with pytest.raises(MeshError):
        load_mesh(tmp_path / "missing.obj")
    with pytest.raises(MeshError):
        load_mesh(write(tmp_path / "flat.obj", "v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n"))
    with pytest.raises(MeshError):
        load_mesh(write(tmp_path / "junk.ply", "not a ply"))
    with pytest.raises(MeshError):
        load_mesh(write(tmp_path / "x.stl", "solid"))


def test_cleanup_drops_degenerate_triangles():
    m = cleanup([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]], [[0, 1, 2], [0, 1, 3]])
    assert m.n_triangles == 1 and len(m.vertices) == 3


def test_mesh_rejects_bad_input():
    with pytest.raises(MeshError):
        TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))
    with pytest.raises(MeshError):
        TriangleMesh(np.array([[0, 0, np.nan]] * 3), np.array([[0, 1, 2]]))


# ---------------------------------------------------------------------------
# normalization

def test_unit_sphere_normalizes_to_identity():
    _, xf = normalize_mesh(icosphere(3))
    np.testing.assert_allclose(xf.translation, 0.0, atol=1e-9)
    assert xf.uniform_scale == pytest.approx(1.0, abs=1e-9)


def test_offset_cube_normalization():
    m = TriangleMesh((cube(2).vertices + 1.0), cube(2).triangles)
    out, xf = normalize_mesh(m)
    np.testing.assert_allclose(xf.translation, [-1, -1, -1], atol=1e-9)
    assert xf.uniform_scale == pytest.approx(1 / np.sqrt(3), rel=1e-9)
    assert np.linalg.norm(out.vertices, axis=1).max() == pytest.approx(1.0, abs=1e-9)


def test_degenerate_normalization():
    with pytest.raises(MeshError):
        normalize_mesh(TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 2]])))


def brute_enclosing_radius(points, center):
    return np.linalg.norm(points - center, axis=1).max()


@given(st.integers(0, 10_000), st.integers(5, 60))
def test_normalization_properties(seed, n):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3)) * rng.uniform(0.1, 5, size=3) + rng.normal(size=3) * 3
    m = TriangleMesh(v, rng.integers(0, n, size=(2 * n, 3)))
    m = cleanup(m.vertices, m.triangles)
    if m.n_triangles == 0:
        return
    out, xf = normalize_mesh(m)
    c, r = bounding_sphere(out.vertices)
    np.testing.assert_allclose(c, 0.0, atol=1e-6)
    assert r == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(xf.inverse(xf.apply(m.vertices)), m.vertices, atol=1e-9)
    again, _ = normalize_mesh(out)
    np.testing.assert_allclose(again.vertices, out.vertices, atol=1e-6)


@given(st.integers(0, 10_000))
def test_bounding_sphere_is_minimal_against_perturbation(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(40, 3))
    c, r = bounding_sphere(pts)
    assert brute_enclosing_radius(pts, c) <= r * (1 + 1e-9)
    # no nearby center does better: the support set pins the optimum
    for d in rng.normal(size=(50, 3)) * 1e-3:
        assert brute_enclosing_radius(pts, c + d) >= r - 1e-9


# ---------------------------------------------------------------------------
# voxelization

def test_cube_eight_octant_voxels():
    svg = voxelize_surface(cube(2), 1.0, origin=(-1.0, -1.0, -1.0))
    assert len(svg) == 8


def test_single_triangle_one_voxel():
    tri = TriangleMesh(np.array([[0.01, 0.01, 0.01], [0.05, 0.01, 0.01], [0.01, 0.05, 0.01]]), np.array([[0, 1, 2]]))
    svg = voxelize_surface(tri, 0.1)
    assert len(svg) == 1
    assert svg.lookup(np.array([[0.02, 0.02, 0.01]]))[0] == 0


def test_voxelize_rejects_bad_resolution():
    with pytest.raises(ValueError):
        voxelize_surface(cube(2), 0.0)


def lp_overlap(tri, lo, hi):
    """Closed triangle-box intersection as an LP feasibility problem over barycentric weights."""
    a_ub = np.vstack([tri.T, -tri.T])
    b_ub = np.concatenate([hi, -lo])
    res = linprog(np.zeros(3), A_ub=a_ub, b_ub=b_ub, A_eq=np.ones((1, 3)), b_eq=[1.0], bounds=[(0, None)] * 3,
                  method="highs")
    return res.status == 0


def test_voxelization_matches_lp_oracle():
    rot = random_rotation(np.random.default_rng(3))
    m = normalize_mesh(TriangleMesh(icosphere(2).vertices @ rot.T, icosphere(2).triangles))[0]
    r = 0.1
    svg = voxelize_surface(m, r)
    expected = set()
    for tri in m.corners():
        tmin, tmax = tri.min(axis=0), tri.max(axis=0)
        lo = np.floor((tmin - svg.origin) / r).astype(int) - 1
        hi = np.floor((tmax - svg.origin) / r).astype(int)
        for i in range(lo[0], hi[0] + 1):
            for j in range(lo[1], hi[1] + 1):
                for k in range(lo[2], hi[2] + 1):
                    cell_lo = svg.origin + np.array([i, j, k]) * r
                    if np.any(cell_lo > tmax) or np.any(cell_lo + r < tmin):
                        continue
                    if lp_overlap(tri, cell_lo, cell_lo + r):
                        expected.add(int(np.ravel_multi_index((i, j, k), svg.dims)))
    assert set(svg.keys.tolist()) == expected


@given(st.floats(0.05, 0.3))
def test_voxel_count_monotone_in_resolution(r):
    m = make_synthetic("torus", level=2)
    assert len(voxelize_surface(m, r / 2)) >= len(voxelize_surface(m, r))


def test_voxel_invariants(suite):
    svg = suite.get("sphere").surface_grid(0.02)
    occ = svg.occupied
    assert np.all(np.diff(svg.keys) > 0)
    assert np.all((occ >= 0) & (occ < np.array(svg.dims)))
    centers = svg.origin + (occ + 0.5) * svg.resolution
    np.testing.assert_array_equal(svg.lookup(centers), np.arange(len(svg)))
    # half-open cells: the low corner belongs to the cell, the high corner to the next one
    low = svg.origin + occ[:1] * svg.resolution
    assert svg.lookup(low)[0] == 0
    assert np.all(svg.cell_of(low + svg.resolution) == occ[:1] + 1)


def test_surface_patches_lie_in_their_voxels(suite):
    a = suite.get("torus")
    svg = a.surface_grid(0.02)
    p = a.patches(0.02)
    assert set(np.unique(p.voxel).tolist()) == set(range(len(svg)))
    cells = svg.occupied[p.voxel]
    lo = svg.origin + cells * svg.resolution
    assert np.all(p.points >= lo - 1e-9) and np.all(p.points <= lo + svg.resolution + 1e-9)
    np.testing.assert_allclose(np.linalg.norm(p.normals, axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# sampling

def test_samples_on_single_triangle():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.5]], dtype=float)
    m = TriangleMesh(v, np.array([[0, 1, 2]]))
    pts = sample_surface_points(m, 1000, seed=1).points
    n = np.cross(v[1] - v[0], v[2] - v[0])
    n /= np.linalg.norm(n)
    assert np.abs((pts - v[0]) @ n).max() < 1e-9


def test_samples_follow_area():
    v = np.array([[0, 0, 0], [3, 0, 0], [0, 1, 0], [0, 0, 5], [1, 0, 5], [0, 1, 5]], dtype=float)
    m = TriangleMesh(v, np.array([[0, 1, 2], [3, 4, 5]]))
    pts = sample_surface_points(m, 100_000, seed=7).points
    big = int((pts[:, 2] < 1).sum())
    assert abs(big - 75_000) <= 0.02 * 75_000
    assert abs((100_000 - big) - 25_000) <= 0.02 * 25_000


def test_sampling_deterministic():
    m = make_synthetic("torus", level=2)
    a = sample_surface_points(m, 500, seed=3).points
    b = sample_surface_points(m, 500, seed=3).points
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        sample_surface_points(m, 0)


def point_triangle_distance(p, tri):
    """Distance from p to a triangle via a tiny constrained least squares over barycentric weights."""
    best = np.inf
    a, b, c = tri
    # interior projection
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n)
    q = p - ((p - a) @ n) * n
    m = np.column_stack([b - a, c - a])
    uv = np.linalg.lstsq(m, q - a, rcond=None)[0]
    if uv.min() >= 0 and uv.sum() <= 1:
        best = abs((p - a) @ n)
    for s, e in ((a, b), (b, c), (c, a)):
        t = np.clip((p - s) @ (e - s) / ((e - s) @ (e - s)), 0, 1)
        best = min(best, np.linalg.norm(p - (s + t * (e - s))))
    return best


def test_samples_lie_on_mesh_and_in_unit_ball():
    m = make_synthetic("sphere", level=1)
    pts = sample_surface_points(m, 200, seed=0).points
    assert np.linalg.norm(pts, axis=1).max() <= 1.0 + 1e-9
    for p in pts:
        assert min(point_triangle_distance(p, t) for t in m.corners()) < 1e-7


# ---------------------------------------------------------------------------
# ray casting

@pytest.mark.parametrize("kind", ["torus", "open_box"])
def test_bvh_matches_linear_scan(kind):
    m = make_synthetic(kind, level=2)
    acc = RayAccelerator(m)
    rng = np.random.default_rng(11)
    origins = rng.normal(size=(10_000, 3))
    origins *= (rng.uniform(1.2, 3.0, size=10_000) / np.linalg.norm(origins, axis=1))[:, None]
    targets = rng.uniform(-0.8, 0.8, size=(10_000, 3))
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t, k = acc.intersect(origins, dirs)
    t_ref, k_ref = linear_scan(origins, dirs, m.corners())
    assert np.isfinite(t_ref).sum() > 5000
    np.testing.assert_array_equal(np.isfinite(t), np.isfinite(t_ref))
    hit = np.isfinite(t)
    np.testing.assert_allclose(t[hit], t_ref[hit], atol=1e-9)
    # ids agree except where two triangles tie on distance (shared edges)
    diff = k != k_ref
    assert np.all(np.abs(t[diff] - t_ref[diff]) < 1e-9)
    assert diff.mean() < 0.01


def test_first_hit_examples():
    plane = TriangleMesh(np.array([[-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]], float),
                         np.array([[0, 1, 2], [0, 2, 3]]))
    k, p, d = ray_first_hit(RayAccelerator(plane), [0, 0, 3], [0, 0, -1])
    np.testing.assert_allclose(p, [0, 0, 1], atol=1e-12)
    assert d == pytest.approx(2.0, abs=1e-12)
    acc = RayAccelerator(make_synthetic("sphere"))
    _, p, d = ray_first_hit(acc, [0, 0, 3], [0, 0, -1])
    assert d == pytest.approx(2.0, abs=5e-3)
    assert ray_first_hit(acc, [0, 0, 3], [0, 0, 1]) is None


def test_pinhole_trace_matches_bvh(suite):
    from viewbench.viewspace import CameraIntrinsics, pixel_rays, view_pose
    acc = suite.get("open_box").accelerator
    intr = CameraIntrinsics(64, 64)
    for d in ([0, 0, 1], [0.6, 0.0, 0.8], [-0.48, 0.6, -0.64]):
        pose = view_pose(np.array(d, float), 2.5)
        rays = pixel_rays(pose, intr)
        a = acc.intersect(np.broadcast_to(pose.position, rays.shape), rays)
        b = acc.trace_pinhole(pose.position, pose.rotation, intr.focal, intr.width, intr.height, rays)
        np.testing.assert_array_equal(a[0], b[0])


# ---------------------------------------------------------------------------
# synthetic shapes

def test_sphere_vertices_on_unit_sphere():
    m = make_synthetic("sphere", level=4)
    np.testing.assert_allclose(np.linalg.norm(m.vertices, axis=1), 1.0, atol=1e-6)


@pytest.mark.parametrize("kind", ["sphere", "cube", "torus"])
def test_closed_shapes_are_watertight(kind):
    assert len(boundary_edges(make_synthetic(kind, level=3))) == 0


def boundary_loops(mesh):
    e = boundary_edges(mesh)
    parent = {}

    def find(x):
        while parent.setdefault(x, x) != x:
            x = parent[x]
        return x

    for a, b in e:
        parent[find(a)] = find(b)
    return len({find(v) for v in e.ravel()})


def test_open_box_single_opening():
    assert boundary_loops(make_synthetic("open_box", wall=0.0)) == 1
    assert boundary_loops(make_synthetic("open_box", wall=0.0, opening=1.5, level=3)) == 1
    # solid walls: the aperture is a tunnel, the surface stays closed and genus 0
    thick = make_synthetic("open_box", wall=0.2)
    assert len(boundary_edges(thick)) == 0
    assert euler_characteristic(thick) == 2


def test_torus_genus_one():
    assert euler_characteristic(make_synthetic("torus", major=0.7, minor=0.3)) == 0
    assert euler_characteristic(make_synthetic("sphere")) == 2


def test_synthetic_parameter_errors():
    with pytest.raises(MeshError):
        open_box(wall=0.2, opening=1.7)
    with pytest.raises(MeshError):
        open_box(wall=1.2)
    with pytest.raises(MeshError):
        torus(0.3, 0.5)
    with pytest.raises(MeshError):
        make_synthetic("teapot")


def test_synthetic_normalized():
    for kind in ("sphere", "cube", "torus", "open_box"):
        m = make_synthetic(kind)
        c, r = bounding_sphere(m.vertices)
        np.testing.assert_allclose(c, 0, atol=1e-6)
        assert r == pytest.approx(1.0, abs=1e-6)
