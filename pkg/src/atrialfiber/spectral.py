"""Laplace-Beltrami eigenfunctions of a triangle mesh as a positional encoding."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from ._npz import write_npz
from .mesh import TriangleSurfaceMesh

__all__ = [
    "SpectralBasis",
    "EigenSolverError",
    "assemble_cotan_stiffness",
    "assemble_lumped_mass",
    "smallest_eigenpairs",
    "compute_basis",
    "embed",
    "save_basis",
    "load_basis",
]

logger = logging.getLogger(__name__)


class EigenSolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SpectralBasis:
    """First ``n_modes`` non-constant Laplace-Beltrami modes.

    ``eigenvalues`` has ``n_modes + 1`` entries, the leading one being the
    (excluded) constant mode. ``eigenfunctions`` are M-orthonormal with the
    largest-magnitude entry positive; ``embedding`` is the same columns
    rescaled to unit max-abs.
    """

    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    constant_mode: np.ndarray
    scales: np.ndarray
    mesh_hash: str = ""

    @property
    def n_modes(self) -> int:
        return self.eigenfunctions.shape[1]

    @property
    def embedding(self) -> np.ndarray:
        return self.eigenfunctions / self.scales


def assemble_cotan_stiffness(mesh: TriangleSurfaceMesh) -> sparse.csr_matrix:
    """Cotangent stiffness matrix (positive semidefinite sign convention)."""
    v, t = mesh.vertices, mesh.triangles
    n = mesh.n_vertices
    rows, cols, vals = [], [], []
    double_area = 2.0 * mesh.areas
    for k in range(3):
        i, j, o = t[:, (k + 1) % 3], t[:, (k + 2) % 3], t[:, k]
        # cotangent of the angle at o opposite edge (i, j)
        u, w = v[i] - v[o], v[j] - v[o]
        cot = np.sum(u * w, axis=1) / double_area
        rows += [i, j]
        cols += [j, i]
        vals += [-0.5 * cot, -0.5 * cot]
    off = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return (off + sparse.diags(diag)).tocsr()


def assemble_lumped_mass(mesh: TriangleSurfaceMesh) -> sparse.dia_matrix:
    m = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(m, mesh.triangles[:, k], mesh.areas / 3.0)
    return sparse.diags(m)


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def smallest_eigenpairs(K, M, count: int, *, tol: float = 1e-8, max_iter: int = 10_000,
                        residual_tol: float = 1e-6, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Smallest ``count + 1`` generalized eigenpairs of ``K v = lam M v``.

    Shift-inverted block subspace iteration with Rayleigh-Ritz and full
    M-reorthonormalisation. ``M`` must be diagonal. Returns eigenvalues
    ascending and M-orthonormal eigenvectors as columns.
    """
    K = sparse.csc_matrix(K)
    mdiag = np.asarray(M.diagonal() if sparse.issparse(M) else np.diag(M), dtype=float)
    if np.any(mdiag <= 0):
        raise ValueError("mass matrix must have a positive diagonal")
    n = K.shape[0]
    want = count + 1
    block = min(n, max(2 * want, want + 8))
    if want > n:
        raise ValueError(f"requested {want} modes from a {n}-dof problem")

    scale = float(np.max(K.diagonal() / mdiag))
    shift = -1e-6 * scale
    lu = splu((K - shift * sparse.diags(mdiag)).tocsc())

    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, block))
    prev = None
    for it in range(1, max_iter + 1):
        X = lu.solve(mdiag[:, None] * X)
        # M-orthonormalise: Q^T M Q = I
        sq = np.sqrt(mdiag)[:, None]
        Q, _ = np.linalg.qr(sq * X)
        Q = Q / sq
        Kq = Q.T @ (K @ Q)
        Kq = 0.5 * (Kq + Kq.T)
        lam, V = np.linalg.eigh(Kq)
        X = Q @ V
        cur = lam[:want]
        if prev is not None and np.max(np.abs(cur - prev) / np.maximum(1.0, np.abs(cur))) < tol:
            R = K @ X[:, :want] - (mdiag[:, None] * X[:, :want]) * cur
            res = np.linalg.norm(R, axis=0) / np.linalg.norm(X[:, :want], axis=0)
            if np.all(res < residual_tol):
                logger.debug("eigensolver converged in %d iterations", it)
                return cur.copy(), X[:, :want].copy()
        prev = cur
    R = K @ X[:, :want] - (mdiag[:, None] * X[:, :want]) * lam[:want]
    worst = float(np.max(np.linalg.norm(R, axis=0) / np.linalg.norm(X[:, :want], axis=0)))
    raise EigenSolverError(f"no convergence after {max_iter} iterations (worst residual {worst:.3e})")


def compute_basis(mesh: TriangleSurfaceMesh, n_modes: int = 10, **kw) -> SpectralBasis:
    K = assemble_cotan_stiffness(mesh)
    M = assemble_lumped_mass(mesh)
    lam, vecs = smallest_eigenpairs(K, M, n_modes, **kw)
    vecs = _fix_signs(vecs)
    funcs = vecs[:, 1:]
    scales = np.max(np.abs(funcs), axis=0)
    return SpectralBasis(
        eigenvalues=lam,
        eigenfunctions=funcs,
        constant_mode=vecs[:, 0],
        scales=scales,
        mesh_hash=mesh.content_hash,
    )


def embed(basis: SpectralBasis, vertex_index) -> np.ndarray:
    """Scaled eigenfunction values at one vertex (or an index array)."""
    return basis.eigenfunctions[vertex_index] / basis.scales


def save_basis(path, basis: SpectralBasis) -> None:
    write_npz(path, {
        "eigenvalues": basis.eigenvalues,
        "eigenfunctions": basis.eigenfunctions,
        "constant_mode": basis.constant_mode,
        "scales": basis.scales,
        "mesh_hash": np.array(basis.mesh_hash),
    })


def load_basis(path, mesh: TriangleSurfaceMesh | None = None) -> SpectralBasis:
    with np.load(Path(path)) as z:
        basis = SpectralBasis(
            eigenvalues=z["eigenvalues"],
            eigenfunctions=z["eigenfunctions"],
            constant_mode=z["constant_mode"],
            scales=z["scales"],
            mesh_hash=str(z["mesh_hash"]),
        )
    if mesh is not None and basis.mesh_hash != mesh.content_hash:
        raise ValueError(f"{path}: eigenbasis was computed for a different mesh")
    return basis
