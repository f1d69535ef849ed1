"""Triangle surface mesh with tangent frames and linear FEM operators."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

__all__ = [
    "MeshError",
    "ElementFrame",
    "TriangleSurfaceMesh",
    "build_vertex_frame",
    "build_vertex_frames",
    "fem_gradient",
    "barycentric_interpolate",
]

MIN_TRIANGLE_AREA = 1e-12


class MeshError(ValueError):
    """Raised for malformed or unsupported mesh input."""


@dataclass(frozen=True)
class ElementFrame:
    """Local frame of one triangle.

    ``rotation`` maps element-local coordinates to global ones (columns are
    the first edge direction, its in-plane complement and the unit normal).
    ``grad_operator`` holds the local gradients of the three linear shape
    functions, one column per node.
    """

    rotation: np.ndarray
    grad_operator: np.ndarray
    area: float
    centroid: np.ndarray


def build_vertex_frames(normals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised tangent frames for an ``(n, 3)`` array of unit normals.

    p1 is the projection of the global axis least aligned with the normal
    (ties resolved x < y < z), and p2 = n x p1.
    """
    normals = np.asarray(normals, dtype=float)
    norms = np.linalg.norm(normals, axis=1)
    if np.any(norms < 1e-300):
        raise MeshError("cannot build a tangent frame for a zero normal")
    n = normals / norms[:, None]
    # argmin returns the first minimum, which gives the x < y < z tie order
    axis = np.argmin(np.abs(n), axis=1)
    a = np.zeros_like(n)
    a[np.arange(len(n)), axis] = 1.0
    p1 = a - np.sum(a * n, axis=1, keepdims=True) * n
    p1 /= np.linalg.norm(p1, axis=1, keepdims=True)
    p2 = np.cross(n, p1)
    p2 /= np.linalg.norm(p2, axis=1, keepdims=True)
    return p1, p2


def build_vertex_frame(normal) -> tuple[np.ndarray, np.ndarray]:
    """Return the tangent pair ``(p1, p2)`` for a single unit normal."""
    p1, p2 = build_vertex_frames(np.asarray(normal, dtype=float)[None, :])
    return p1[0], p2[0]


def fem_gradient(element: ElementFrame, nodal_values) -> np.ndarray:
    """Global gradient of the linear interpolant of three nodal values."""
    u = np.asarray(nodal_values, dtype=float)
    return element.rotation[:, :2] @ (element.grad_operator @ u)


def barycentric_interpolate(element: ElementFrame | None, nodal_vectors, weights) -> np.ndarray:
    """Convex combination of three nodal vectors.

    ``element`` is accepted for call-site symmetry with :func:`fem_gradient`;
    the interpolation itself only needs the nodal data.
    """
    w = np.asarray(weights, dtype=float)
    if w.shape != (3,):
        raise ValueError("expected three barycentric weights")
    if np.any(w < 0):
        raise ValueError(f"negative barycentric weight in {w}")
    if abs(w.sum() - 1.0) > 1e-12:
        raise ValueError(f"barycentric weights sum to {w.sum()!r}, not 1")
    vals = np.asarray(nodal_vectors, dtype=float)
    return np.tensordot(w, vals, axes=(0, 0))


class TriangleSurfaceMesh:
    """Immutable triangle surface mesh in centimetres.

    Parameters
    ----------
    vertices : (n, 3) array_like
        Vertex positions.
    triangles : (m, 3) array_like of int
        Consistently oriented vertex index triples.

    All per-vertex and per-element geometry is computed eagerly on
    construction so every consumer sees the same arrays.
    """

    def __init__(self, vertices, triangles):
        v = np.array(vertices, dtype=float)
        t = np.array(triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] not in (2, 3):
            raise MeshError(f"vertices must be (n, 3), got shape {v.shape}")
        if v.shape[1] == 2:
            v = np.column_stack([v, np.zeros(len(v))])
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError(f"triangles must be (m, 3), got shape {t.shape}")
        if len(t) == 0:
            raise MeshError("mesh has no triangles")
        if not np.all(np.isfinite(v)):
            raise MeshError("non-finite vertex coordinate")
        bad = np.flatnonzero((t < 0).any(axis=1) | (t >= len(v)).any(axis=1))
        if bad.size:
            raise MeshError(f"triangle {bad[0]} has vertex index out of range: {t[bad[0]].tolist()}")
        unused = np.setdiff1d(np.arange(len(v)), t.ravel())
        if unused.size:
            raise MeshError(f"vertex {unused[0]} is not used by any triangle")

        self.vertices = v
        self.triangles = t
        self._check_manifold()

        p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        cross = np.cross(p1 - p0, p2 - p0)
        double_area = np.linalg.norm(cross, axis=1)
        self.areas = 0.5 * double_area
        degenerate = np.flatnonzero(self.areas <= MIN_TRIANGLE_AREA)
        if degenerate.size:
            raise MeshError(f"degenerate triangle {degenerate[0]} (area {self.areas[degenerate[0]]:.3e})")
        self.total_area = float(np.sum(self.areas))
        self.element_normals = cross / double_area[:, None]
        self.centroids = (p0 + p1 + p2) / 3.0

        vn = np.zeros_like(v)
        for k in range(3):
            np.add.at(vn, t[:, k], cross)  # |cross| = 2 * area, so area weighted
        self.vertex_normals = vn / np.linalg.norm(vn, axis=1, keepdims=True)
        self.vertex_p1, self.vertex_p2 = build_vertex_frames(self.vertex_normals)
        self.element_p1, self.element_p2 = build_vertex_frames(self.element_normals)

        # element-local frame: first axis along edge v0 -> v1
        e1 = p1 - p0
        ax1 = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
        ax2 = np.cross(self.element_normals, ax1)
        self.rotations = np.stack([ax1, ax2, self.element_normals], axis=2)
        local = np.zeros((len(t), 3, 2))
        for k, p in enumerate((p0, p1, p2)):
            d = p - p0
            local[:, k, 0] = np.sum(d * ax1, axis=1)
            local[:, k, 1] = np.sum(d * ax2, axis=1)
        x, y = local[..., 0], local[..., 1]
        b = np.empty((len(t), 2, 3))
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            b[:, 0, i] = y[:, j] - y[:, k]
            b[:, 1, i] = x[:, k] - x[:, j]
        self.grad_operators = b / double_area[:, None, None]
        self.local_coords = local

    # ------------------------------------------------------------------
    def _check_manifold(self) -> None:
        t = self.triangles
        edges = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        if np.any(counts > 2):
            uniq = np.unique(edges, axis=0)
            e = uniq[np.argmax(counts > 2)]
            raise MeshError(f"non-manifold edge {tuple(int(i) for i in e)} shared by more than two triangles")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def vertex_frames(self) -> np.ndarray:
        """``(n, 2, 3)`` array stacking p1 and p2 per vertex."""
        return np.stack([self.vertex_p1, self.vertex_p2], axis=1)

    @property
    def element_tangent_frames(self) -> np.ndarray:
        """``(m, 2, 3)`` tangent frames built from element normals with the vertex rule."""
        return np.stack([self.element_p1, self.element_p2], axis=1)

    def element(self, index: int) -> ElementFrame:
        return ElementFrame(
            rotation=self.rotations[index],
            grad_operator=self.grad_operators[index],
            area=float(self.areas[index]),
            centroid=self.centroids[index],
        )

    @cached_property
    def global_gradient_operators(self) -> np.ndarray:
        """``(m, 3, 3)``: maps the three nodal values to the 3D gradient."""
        return np.einsum("mij,mjk->mik", self.rotations[:, :, :2], self.grad_operators)

    @cached_property
    def tangent_gradient_operators(self) -> np.ndarray:
        """``(m, 2, 3)``: nodal values to gradient components in the element tangent frame."""
        return np.einsum("mai,mik->mak", self.element_tangent_frames, self.global_gradient_operators)

    @cached_property
    def edges(self) -> np.ndarray:
        t = self.triangles
        e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        e = self.edges
        n = self.n_vertices
        data = np.ones(2 * len(e))
        a = sparse.coo_matrix((data, (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(n, n))
        return a.tocsr()

    @cached_property
    def is_connected(self) -> bool:
        n_comp, _ = connected_components(self.adjacency, directed=False)
        return n_comp == 1

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        t = self.triangles
        e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq[counts == 1]

    @cached_property
    def mean_edge_length(self) -> float:
        e = self.edges
        return float(np.mean(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)))

    @cached_property
    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.triangles, dtype="<i8").tobytes())
        return h.hexdigest()

    def __repr__(self) -> str:
        return f"TriangleSurfaceMesh(n_vertices={self.n_vertices}, n_triangles={self.n_triangles}, area={self.total_area:.4g})"
