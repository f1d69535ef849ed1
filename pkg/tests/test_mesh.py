import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from atrialfiber.mesh import (
    MeshError,
    TriangleSurfaceMesh,
    barycentric_interpolate,
    build_vertex_frame,
    build_vertex_frames,
    fem_gradient,
    flat_sheet,
    holed_sphere,
    icosphere,
    load_mesh,
    single_triangle,
    write_off,
    write_vtk,
)


def _unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------- construction
def test_single_triangle_area():
    m = single_triangle()
    assert m.total_area == 0.5


def test_icosphere_area_close_to_sphere():
    m = icosphere(4)
    assert abs(m.total_area - 4 * np.pi) / (4 * np.pi) < 5e-3


def test_total_area_is_sum_of_element_areas():
    m = icosphere(2)
    assert m.total_area == float(np.sum(m.areas))


def test_rejects_index_out_of_range():
    with pytest.raises(MeshError, match="out of range"):
        TriangleSurfaceMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]])


def test_rejects_degenerate_triangle_with_index():
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]]
    with pytest.raises(MeshError, match="degenerate triangle 1"):
        TriangleSurfaceMesh(v, [[0, 1, 2], [0, 1, 3]])


def test_rejects_non_manifold_edge():
    v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]]
    with pytest.raises(MeshError, match="non-manifold"):
        TriangleSurfaceMesh(v, [[0, 1, 2], [1, 0, 3], [0, 1, 4]])


def test_rejects_unused_vertex():
    with pytest.raises(MeshError, match="not used"):
        TriangleSurfaceMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], [[0, 1, 2]])


def test_sheet_is_connected_with_boundary():
    m = flat_sheet(10.0, nx=8)
    assert m.is_connected
    assert len(m.boundary_edges) == 4 * 8
    assert abs(m.total_area - 100.0) < 1e-10


def test_holed_sphere_has_two_boundary_loops():
    m = holed_sphere(3)
    assert m.is_connected
    assert len(m.boundary_edges) > 0
    assert m.total_area < 150.0


# ---------------------------------------------------------------- frames
def test_frame_for_z_normal():
    p1, p2 = build_vertex_frame([0.0, 0.0, 1.0])
    np.testing.assert_array_equal(p1, [1.0, 0.0, 0.0])
    np.testing.assert_array_equal(p2, [0.0, 1.0, 0.0])


def test_frame_for_x_normal():
    n = np.array([1.0, 0.0, 0.0])
    p1, p2 = build_vertex_frame(n)
    assert abs(p1 @ n) < 1e-15
    np.testing.assert_allclose(p2, np.cross(n, p1), atol=1e-15)


def test_zero_normal_rejected():
    with pytest.raises(MeshError):
        build_vertex_frame([0.0, 0.0, 0.0])


def test_random_frames_orthonormal_right_handed():
    rng = np.random.default_rng(0)
    n = rng.normal(size=(1000, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    p1, p2 = build_vertex_frames(n)
    for a, b in ((p1, p2), (p1, n), (p2, n)):
        assert np.max(np.abs(np.sum(a * b, axis=1))) < 1e-10
    for a in (p1, p2):
        assert np.max(np.abs(np.linalg.norm(a, axis=1) - 1)) < 1e-10
    assert np.max(np.abs(np.cross(p1, p2) - n)) < 1e-8


@settings(max_examples=200, deadline=None)
@given(st.tuples(*[st.floats(-1, 1, allow_nan=False) for _ in range(3)]).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_frame_property(v):
    n = _unit(v)
    p1, p2 = build_vertex_frame(n)
    assert abs(p1 @ n) < 1e-10 and abs(p2 @ n) < 1e-10 and abs(p1 @ p2) < 1e-10
    np.testing.assert_allclose(np.cross(p1, p2), n, atol=1e-8)


def test_mesh_frames_satisfy_invariants():
    m = icosphere(3)
    n, p1, p2 = m.vertex_normals, m.vertex_p1, m.vertex_p2
    assert np.max(np.abs(np.sum(p1 * n, axis=1))) < 1e-10
    assert np.max(np.abs(np.sum(p2 * n, axis=1))) < 1e-10
    assert np.max(np.abs(np.cross(p1, p2) - n)) < 1e-8


def test_element_frames():
    m = icosphere(2)
    R = m.rotations
    eye = np.einsum("mji,mjk->mik", R, R)
    assert np.max(np.abs(eye - np.eye(3))) < 1e-10
    np.testing.assert_allclose(R[:, :, 2], m.element_normals, atol=1e-15)
    # partition of unity
    assert np.max(np.abs(m.grad_operators.sum(axis=2))) < 1e-12


def test_frames_deterministic_across_loads(tmp_path):
    m = icosphere(2)
    write_off(tmp_path / "a.off", m)
    a = load_mesh(tmp_path / "a.off")
    b = load_mesh(tmp_path / "a.off")
    assert np.array_equal(a.vertex_p1, b.vertex_p1) and np.array_equal(a.vertex_p2, b.vertex_p2)
    assert np.array_equal(a.rotations, b.rotations)


# ---------------------------------------------------------------- FEM
def test_fem_gradient_constant_is_zero():
    m = single_triangle()
    np.testing.assert_allclose(fem_gradient(m.element(0), [2.5, 2.5, 2.5]), 0.0, atol=1e-15)


def test_fem_gradient_of_x():
    m = single_triangle()
    g = fem_gradient(m.element(0), m.vertices[:, 0])
    np.testing.assert_allclose(g, [1.0, 0.0, 0.0], atol=1e-12)


def test_fem_gradient_linear_random_planar_triangles():
    rng = np.random.default_rng(1)
    for _ in range(200):
        v = np.column_stack([rng.uniform(-3, 3, size=(3, 2)), np.zeros(3)])
        if abs(np.cross(v[1] - v[0], v[2] - v[0])[2]) < 1e-3:
            continue
        m = TriangleSurfaceMesh(v, [[0, 1, 2]])
        u = 2 * v[:, 0] + 3 * v[:, 1]
        g = fem_gradient(m.element(0), u)
        np.testing.assert_allclose(g, [2, 3, 0], rtol=1e-10, atol=1e-10)


def test_fem_gradient_tilted_plane_exact():
    # linear field restricted to an arbitrary plane: the gradient is its tangential part
    rng = np.random.default_rng(2)
    for _ in range(50):
        v = rng.normal(size=(3, 3))
        m = TriangleSurfaceMesh(v, [[0, 1, 2]])
        c = rng.normal(size=3)
        g = fem_gradient(m.element(0), v @ c)
        n = m.element_normals[0]
        expect = c - (c @ n) * n
        np.testing.assert_allclose(g, expect, rtol=1e-10, atol=1e-10)
        assert abs(g @ n) < 1e-12 * max(1.0, np.linalg.norm(c))


def test_tangent_gradient_operator_matches_global():
    m = icosphere(2)
    u = np.sin(m.vertices[:, 0]) + m.vertices[:, 2] ** 2
    G3 = np.einsum("mik,mk->mi", m.global_gradient_operators, u[m.triangles])
    G2 = np.einsum("mak,mk->ma", m.tangent_gradient_operators, u[m.triangles])
    back = G2[:, 0:1] * m.element_p1 + G2[:, 1:2] * m.element_p2
    np.testing.assert_allclose(back, G3, atol=1e-12)


# ---------------------------------------------------------------- interpolation
def test_barycentric_vertex_weight():
    vals = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 7.0]])
    np.testing.assert_array_equal(barycentric_interpolate(None, vals, [1, 0, 0]), vals[0])


def test_barycentric_centroid_is_mean():
    vals = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 7.0]])
    np.testing.assert_allclose(barycentric_interpolate(None, vals, [1 / 3, 1 / 3, 1 / 3]), vals.mean(axis=0),
                               rtol=1e-15)


def test_barycentric_negative_weight_rejected():
    with pytest.raises(ValueError):
        barycentric_interpolate(None, np.eye(3), [1.2, -0.2, 0.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3))
def test_barycentric_in_convex_hull(raw):
    w = np.array(raw) / np.sum(raw)
    w[2] = 1.0 - w[0] - w[1]
    if w[2] < 0:
        return
    vals = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    p = barycentric_interpolate(None, vals, w)
    assert p[0] >= -1e-15 and p[1] >= -1e-15 and p.sum() <= 1 + 1e-12


# ---------------------------------------------------------------- I/O
def test_off_roundtrip(tmp_path):
    m = icosphere(2)
    write_off(tmp_path / "s.off", m)
    r = load_mesh(tmp_path / "s.off")
    assert np.array_equal(r.vertices, m.vertices) and np.array_equal(r.triangles, m.triangles)


def test_vtk_roundtrip_with_fields(tmp_path):
    m = flat_sheet(2.0, nx=3)
    write_vtk(tmp_path / "s.vtk", m, scalars={"s": np.arange(m.n_vertices, dtype=float)},
              vectors={"f": m.vertex_p1})
    r = load_mesh(tmp_path / "s.vtk")
    assert np.array_equal(r.vertices, m.vertices) and np.array_equal(r.triangles, m.triangles)
    text = (tmp_path / "s.vtk").read_text()
    assert f"POINT_DATA {m.n_vertices}" in text and "VECTORS f double" in text


def test_off_index_out_of_range_reports_line(tmp_path):
    p = tmp_path / "bad.off"
    p.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n")
    with pytest.raises(MeshError, match=r"bad.off:6: vertex index out of range"):
        load_mesh(p)


def test_off_parse_failure(tmp_path):
    p = tmp_path / "bad.off"
    p.write_text("OFF\n3 1 0\n0 0 zero\n1 0 0\n0 1 0\n3 0 1 2\n")
    with pytest.raises(MeshError, match=":3:"):
        load_mesh(p)


def test_vtk_index_out_of_range_reports_line(tmp_path):
    p = tmp_path / "bad.vtk"
    p.write_text("# vtk DataFile Version 3.0\nx\nASCII\nDATASET POLYDATA\nPOINTS 3 double\n"
                 "0 0 0\n1 0 0\n0 1 0\nPOLYGONS 1 4\n3 0 1 9\n")
    with pytest.raises(MeshError, match=r"bad.vtk:10"):
        load_mesh(p)


def test_unknown_format(tmp_path):
    p = tmp_path / "m.stl"
    p.write_text("solid")
    with pytest.raises(MeshError, match="unknown mesh format"):
        load_mesh(p)
