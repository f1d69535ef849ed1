"""OFF and legacy-VTK ASCII readers, legacy-VTK POLYDATA writer."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

from .core import MeshError, TriangleSurfaceMesh

__all__ = ["load_mesh", "read_off", "read_vtk", "write_off", "write_vtk"]


def _tokens_with_lines(text: str):
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0]
        for tok in line.split():
            yield lineno, tok


def read_off(path) -> tuple[np.ndarray, np.ndarray]:
    text = Path(path).read_text()
    lines = [(i, ln.split("#", 1)[0].strip()) for i, ln in enumerate(text.splitlines(), start=1)]
    lines = [(i, ln) for i, ln in lines if ln]
    if not lines or not lines[0][1].startswith("OFF"):
        raise MeshError(f"{path}: missing OFF header")
    head = lines[0][1][3:].split()
    pos = 1
    if not head:
        head = lines[1][1].split()
        pos = 2
    try:
        nv, nf = int(head[0]), int(head[1])
    except (IndexError, ValueError) as exc:
        raise MeshError(f"{path}: bad OFF counts line") from exc
    verts = []
    for lineno, ln in lines[pos:pos + nv]:
        parts = ln.split()
        try:
            verts.append([float(p) for p in parts[:3]])
        except ValueError as exc:
            raise MeshError(f"{path}:{lineno}: bad vertex line {ln!r}") from exc
    if len(verts) != nv:
        raise MeshError(f"{path}: expected {nv} vertices, found {len(verts)}")
    tris = []
    for lineno, ln in lines[pos + nv:pos + nv + nf]:
        try:
            parts = [int(p) for p in ln.split()]
        except ValueError as exc:
            raise MeshError(f"{path}:{lineno}: bad face line {ln!r}") from exc
        k = parts[0]
        if k != 3:
            raise MeshError(f"{path}:{lineno}: only triangles supported, got {k}-gon")
        idx = parts[1:4]
        if min(idx) < 0 or max(idx) >= nv:
            raise MeshError(f"{path}:{lineno}: vertex index out of range in {ln!r}")
        tris.append(idx)
    if len(tris) != nf:
        raise MeshError(f"{path}: expected {nf} faces, found {len(tris)}")
    return np.array(verts, dtype=float), np.array(tris, dtype=np.int64)


def read_vtk(path) -> tuple[np.ndarray, np.ndarray]:
    """Read POINTS and POLYGONS from a legacy ASCII POLYDATA file."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if len(lines) < 4 or not lines[0].startswith("# vtk DataFile"):
        raise MeshError(f"{path}: missing legacy VTK header")
    if lines[2].strip().upper() != "ASCII":
        raise MeshError(f"{path}: only ASCII legacy VTK is supported")
    toks = list(_tokens_with_lines("\n".join(lines[3:])))
    toks = [(ln + 3, t) for ln, t in toks]
    i = 0
    verts = tris = None
    while i < len(toks):
        lineno, t = toks[i]
        key = t.upper()
        if key == "DATASET":
            if toks[i + 1][1].upper() != "POLYDATA":
                raise MeshError(f"{path}:{lineno}: only POLYDATA datasets are supported")
            i += 2
        elif key == "POINTS":
            n = int(toks[i + 1][1])
            vals = toks[i + 3:i + 3 + 3 * n]
            try:
                verts = np.array([float(v) for _, v in vals]).reshape(n, 3)
            except ValueError as exc:
                raise MeshError(f"{path}:{lineno}: bad POINTS block") from exc
            i += 3 + 3 * n
        elif key == "POLYGONS":
            n, size = int(toks[i + 1][1]), int(toks[i + 2][1])
            j = i + 3
            out = []
            for _ in range(n):
                ln_k, k = toks[j]
                if int(k) != 3:
                    raise MeshError(f"{path}:{ln_k}: only triangles supported")
                idx = [int(v) for _, v in toks[j + 1:j + 4]]
                if verts is not None and (min(idx) < 0 or max(idx) >= len(verts)):
                    raise MeshError(f"{path}:{ln_k}: vertex index out of range {idx}")
                out.append(idx)
                j += 4
            if 4 * n != size:
                raise MeshError(f"{path}:{lineno}: POLYGONS size mismatch")
            tris = np.array(out, dtype=np.int64)
            i = j
        elif key in ("POINT_DATA", "CELL_DATA"):
            break
        else:
            i += 1
    if verts is None or tris is None:
        raise MeshError(f"{path}: POINTS or POLYGONS section missing")
    return verts, tris


def load_mesh(path, format: str | None = None) -> TriangleSurfaceMesh:
    """Load a triangle mesh from an OFF or legacy ASCII VTK file.

    ``format`` is ``"off"`` or ``"vtk"``; inferred from the suffix if omitted.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower().replace("legacy-vtk-ascii", "vtk")
    if fmt == "off":
        v, t = read_off(path)
    elif fmt == "vtk":
        v, t = read_vtk(path)
    else:
        raise MeshError(f"unknown mesh format {fmt!r}")
    return TriangleSurfaceMesh(v, t)


def write_off(path, mesh: TriangleSurfaceMesh) -> None:
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.n_vertices} {mesh.n_triangles} 0\n")
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")
        for a, b, c in mesh.triangles.tolist():
            fh.write(f"3 {a} {b} {c}\n")


def write_vtk(
    path,
    mesh: TriangleSurfaceMesh,
    scalars: Mapping[str, np.ndarray] | None = None,
    vectors: Mapping[str, np.ndarray] | None = None,
    title: str = "atrialfiber field export",
) -> None:
    """Write legacy ASCII POLYDATA with POINT_DATA scalars and vectors.

    Coordinates are written with ``repr`` so a reload reproduces them exactly.
    """
    n = mesh.n_vertices
    scalars = dict(scalars or {})
    vectors = dict(vectors or {})
    for name, arr in scalars.items():
        if np.shape(arr) != (n,):
            raise ValueError(f"scalar field {name!r} has shape {np.shape(arr)}, expected ({n},)")
    for name, arr in vectors.items():
        if np.shape(arr) != (n, 3):
            raise ValueError(f"vector field {name!r} has shape {np.shape(arr)}, expected ({n}, 3)")
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(title.replace("\n", " ")[:255] + "\n")
        fh.write("ASCII\nDATASET POLYDATA\n")
        fh.write(f"POINTS {n} double\n")
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")
        fh.write(f"POLYGONS {mesh.n_triangles} {4 * mesh.n_triangles}\n")
        for a, b, c in mesh.triangles.tolist():
            fh.write(f"3 {a} {b} {c}\n")
        if scalars or vectors:
            fh.write(f"POINT_DATA {n}\n")
        for name, arr in scalars.items():
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            fh.write("\n".join(repr(float(x)) for x in arr) + "\n")
        for name, arr in vectors.items():
            fh.write(f"VECTORS {name} double\n")
            fh.write("\n".join(f"{x!r} {y!r} {z!r}" for x, y, z in np.asarray(arr, dtype=float).tolist()) + "\n")
