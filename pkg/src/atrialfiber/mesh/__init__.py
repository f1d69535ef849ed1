from .core import (
    ElementFrame,
    MeshError,
    TriangleSurfaceMesh,
    barycentric_interpolate,
    build_vertex_frame,
    build_vertex_frames,
    fem_gradient,
)
from .io import load_mesh, write_off, write_vtk
from .shapes import flat_sheet, holed_sphere, icosphere, single_triangle

__all__ = [
    "ElementFrame",
    "MeshError",
    "TriangleSurfaceMesh",
    "barycentric_interpolate",
    "build_vertex_frame",
    "build_vertex_frames",
    "fem_gradient",
    "load_mesh",
    "write_off",
    "write_vtk",
    "flat_sheet",
    "holed_sphere",
    "icosphere",
    "single_triangle",
]
