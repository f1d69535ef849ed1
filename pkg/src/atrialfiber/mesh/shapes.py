"""Synthetic benchmark geometries."""

from __future__ import annotations

import numpy as np

from .core import TriangleSurfaceMesh

__all__ = ["flat_sheet", "icosphere", "holed_sphere", "single_triangle", "ATRIAL_AREA_CM2"]

ATRIAL_AREA_CM2 = 150.0


def single_triangle() -> TriangleSurfaceMesh:
    return TriangleSurfaceMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])


def flat_sheet(width: float = 10.0, height: float | None = None, nx: int = 50, ny: int | None = None,
               origin=(0.0, 0.0)) -> TriangleSurfaceMesh:
    """Structured triangulation of ``[x0, x0+width] x [y0, y0+height]`` in z=0.

    Every grid cell is split along the same diagonal, giving counter-clockwise
    triangles with +z normals.
    """
    height = width if height is None else height
    ny = nx if ny is None else ny
    xs = origin[0] + np.linspace(0.0, width, nx + 1)
    ys = origin[1] + np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    tris = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return TriangleSurfaceMesh(verts, tris)


def _icosahedron():
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def _icosphere_arrays(subdivisions: int):
    verts, faces = _icosahedron()
    verts = list(verts)
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new)
    return np.array(verts), np.asarray(faces)


def icosphere(subdivisions: int = 4, radius: float = 1.0) -> TriangleSurfaceMesh:
    """Subdivided icosahedron projected to a sphere (outward normals)."""
    v, f = _icosphere_arrays(subdivisions)
    return TriangleSurfaceMesh(radius * v, f)


def holed_sphere(subdivisions: int = 4, radius: float | None = None,
                 holes=((0.0, 0.0, 1.0, 0.35), (0.0, 0.0, -1.0, 0.35))) -> TriangleSurfaceMesh:
    """Sphere with circular openings, a crude atrium-like annulus.

    ``holes`` lists ``(dx, dy, dz, angular_radius)``; triangles whose centroid
    direction lies within the angular radius of a hole axis are removed.
    ``radius`` defaults to the value giving the full sphere ~150 cm^2.
    """
    if radius is None:
        radius = float(np.sqrt(ATRIAL_AREA_CM2 / (4 * np.pi)))
    v, f = _icosphere_arrays(subdivisions)
    cent = v[f].mean(axis=1)
    cent /= np.linalg.norm(cent, axis=1, keepdims=True)
    keep = np.ones(len(f), dtype=bool)
    for dx, dy, dz, ang in holes:
        axis = np.array([dx, dy, dz], dtype=float)
        axis /= np.linalg.norm(axis)
        keep &= cent @ axis < np.cos(ang)
    f = f[keep]
    used = np.unique(f)
    remap = -np.ones(len(v), dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleSurfaceMesh(radius * v[used], remap[f])
