"""Forward model: rule-based fibers, anisotropic fast iterative eikonal solver,
pacing-site selection and noisy sparse sampling."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ._npz import write_npz
from .mesh import TriangleSurfaceMesh

__all__ = [
    "EikonalError",
    "GroundTruthField",
    "ActivationMap",
    "ActivationDataset",
    "rule_based_fibers",
    "isotropic_field",
    "local_update",
    "fim_solve",
    "farthest_point_pacing",
    "sample_count",
    "sample_measurements",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
]

logger = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
BRACKET_TOL = 1e-10
DEFAULT_V_L = 0.06
DEFAULT_V_T = 0.03


class EikonalError(RuntimeError):
    pass


@dataclass
class GroundTruthField:
    """Per-vertex fiber directions and conduction speeds (cm/ms)."""

    fibers: np.ndarray
    v_l: np.ndarray
    v_t: np.ndarray
    normals: np.ndarray
    flagged: np.ndarray = None  # vertices where the rule fell back to neighbours

    def __post_init__(self):
        n = len(self.fibers)
        self.v_l = np.broadcast_to(np.asarray(self.v_l, float), (n,)).copy()
        self.v_t = np.broadcast_to(np.asarray(self.v_t, float), (n,)).copy()
        if self.flagged is None:
            self.flagged = np.zeros(n, dtype=bool)
        if np.any(self.v_t <= 0) or np.any(self.v_l < self.v_t):
            raise ValueError("require v_l >= v_t > 0 everywhere")

    @property
    def transverse(self) -> np.ndarray:
        return np.cross(self.normals, self.fibers)

    def vertex_tensors(self) -> np.ndarray:
        l, t = self.fibers, self.transverse
        return (self.v_l ** 2)[:, None, None] * np.einsum("ni,nj->nij", l, l) + (
            self.v_t ** 2)[:, None, None] * np.einsum("ni,nj->nij", t, t)

    def element_tensors(self, mesh: TriangleSurfaceMesh) -> np.ndarray:
        """Element-constant tensors: mean of the three vertex tensors."""
        vt = self.vertex_tensors()
        return vt[mesh.triangles].mean(axis=1)


def _tangent_normalize(vectors, normals):
    v = vectors - np.sum(vectors * normals, axis=1, keepdims=True) * normals
    norm = np.linalg.norm(v, axis=1)
    return v, norm


def _fill_from_neighbours(mesh, vecs, bad):
    """Replace ``bad`` rows by the sign-aligned mean of good neighbours."""
    vecs = vecs.copy()
    good = ~bad
    adj = mesh.adjacency
    n = mesh.vertex_normals
    for _ in range(mesh.n_vertices):
        todo = np.flatnonzero(~good)
        if todo.size == 0:
            break
        progressed = False
        for i in todo:  # ascending index order keeps the fill deterministic
            nb = adj.indices[adj.indptr[i]:adj.indptr[i + 1]]
            nb = nb[good[nb]]
            if nb.size == 0:
                continue
            ref = vecs[nb[0]]
            acc = np.zeros(3)
            for j in np.sort(nb):
                w = vecs[j]
                acc += w if w @ ref >= 0 else -w
            acc -= (acc @ n[i]) * n[i]
            if np.linalg.norm(acc) < 1e-12:
                acc = mesh.vertex_p1[i]
            vecs[i] = acc / np.linalg.norm(acc)
            good[i] = True
            progressed = True
        if not progressed:
            raise ValueError("fiber rule undefined on a whole connected component")
    return vecs


def rule_based_fibers(mesh: TriangleSurfaceMesh, rule: str | Callable = "constant_angle", *,
                      theta: float = 0.0, axis=(0.0, 0.0, 1.0), v_l=DEFAULT_V_L, v_t=DEFAULT_V_T,
                      undefined_tol: float = 1e-3) -> GroundTruthField:
    """Analytic fiber field.

    ``rule`` is ``"constant_angle"`` (angle ``theta`` from p1 in each tangent
    plane), ``"circumferential"`` (along circles around ``axis``) or a
    callable ``f(positions, normals) -> (n, 3)`` whose output is projected to
    the tangent plane. Vertices where the rule degenerates take a neighbour
    average and are reported in ``flagged``.
    """
    normals = mesh.vertex_normals
    if callable(rule):
        raw = np.asarray(rule(mesh.vertices, normals), dtype=float)
        vecs, norm = _tangent_normalize(raw, normals)
    elif rule == "constant_angle":
        vecs = np.cos(theta) * mesh.vertex_p1 + np.sin(theta) * mesh.vertex_p2
        norm = np.linalg.norm(vecs, axis=1)
    elif rule == "circumferential":
        ax = np.asarray(axis, dtype=float)
        ax = ax / np.linalg.norm(ax)
        vecs = np.cross(ax[None, :], normals)
        vecs, norm = _tangent_normalize(vecs, normals)
    else:
        raise ValueError(f"unknown fiber rule {rule!r}")
    bad = norm < undefined_tol
    vecs = vecs / np.where(bad, 1.0, norm)[:, None]
    if np.any(bad):
        logger.info("fiber rule undefined at %d vertices, filling from neighbours", int(bad.sum()))
        vecs = _fill_from_neighbours(mesh, vecs, bad)
    return GroundTruthField(fibers=vecs, v_l=v_l, v_t=v_t, normals=normals, flagged=bad)


def isotropic_field(mesh: TriangleSurfaceMesh, speed: float = 1.0) -> GroundTruthField:
    return GroundTruthField(fibers=mesh.vertex_p1.copy(), v_l=speed, v_t=speed, normals=mesh.vertex_normals)


# ----------------------------------------------------------------------------
# local solver
# ----------------------------------------------------------------------------
def _travel(t_a, t_b, A, B, C, lam):
    q = np.maximum(A - 2.0 * B * lam + C * lam * lam, 0.0)
    return t_a + lam * (t_b - t_a) + np.sqrt(q)


def _golden_min(t_a, t_b, A, B, C):
    """Vectorised golden-section minimum of the triangle update over [0, 1]."""
    lo = np.zeros_like(t_a)
    hi = np.ones_like(t_a)
    c = hi - GOLDEN * (hi - lo)
    d = lo + GOLDEN * (hi - lo)
    fc = _travel(t_a, t_b, A, B, C, c)
    fd = _travel(t_a, t_b, A, B, C, d)
    width = 1.0
    while width > BRACKET_TOL:
        left = fc < fd
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        nc = np.where(left, hi - GOLDEN * (hi - lo), d)
        nd = np.where(left, c, lo + GOLDEN * (hi - lo))
        fnew = _travel(t_a, t_b, A, B, C, np.where(left, nc, nd))
        fd, fc = np.where(left, fc, fnew), np.where(left, fnew, fd)
        c, d = nc, nd
        width *= GOLDEN
    mid = _travel(t_a, t_b, A, B, C, 0.5 * (lo + hi))
    ends = np.minimum(_travel(t_a, t_b, A, B, C, 0.0), _travel(t_a, t_b, A, B, C, 1.0))
    return np.minimum(mid, ends)


def _update_candidates(t_a, t_b, A, B, C):
    out = np.full(t_a.shape, np.inf)
    fa, fb = np.isfinite(t_a), np.isfinite(t_b)
    both = fa & fb
    if np.any(both):
        out[both] = _golden_min(t_a[both], t_b[both], A[both], B[both], C[both])
    only_a = fa & ~fb
    out[only_a] = t_a[only_a] + np.sqrt(A[only_a])
    only_b = fb & ~fa
    out[only_b] = t_b[only_b] + np.sqrt(np.maximum(A[only_b] - 2 * B[only_b] + C[only_b], 0.0))
    return out


def local_update(local_coords, tensor2, known_times) -> float:
    """Candidate arrival time at a triangle's third vertex.

    ``local_coords`` is ``(3, 2)``: the two known vertices then the vertex to
    update, in element coordinates. ``tensor2`` is the 2x2 velocity-squared
    tensor D in the same frame; travel time along ``e`` is ``sqrt(e^T D^-1 e)``.
    """
    x = np.asarray(local_coords, dtype=float)
    minv = np.linalg.inv(np.asarray(tensor2, dtype=float))
    e0 = x[2] - x[0]
    d = x[1] - x[0]
    A, B, C = e0 @ minv @ e0, e0 @ minv @ d, d @ minv @ d
    ta, tb = (float(t) for t in known_times)
    return float(_update_candidates(np.array([ta]), np.array([tb]), np.array([A]), np.array([B]), np.array([C]))[0])


@dataclass
class _UpdateTable:
    target: np.ndarray
    known_a: np.ndarray
    known_b: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray


def _build_updates(mesh: TriangleSurfaceMesh, gt: GroundTruthField) -> _UpdateTable:
    D = gt.element_tensors(mesh)
    R2 = mesh.rotations[:, :, :2]
    D2 = np.einsum("mia,mij,mjb->mab", R2, D, R2)
    minv = np.linalg.inv(D2)
    x = mesh.local_coords
    tgt, ka, kb, As, Bs, Cs = [], [], [], [], [], []
    for k in range(3):
        a, b = (k + 1) % 3, (k + 2) % 3
        e0 = x[:, k] - x[:, a]
        d = x[:, b] - x[:, a]
        As.append(np.einsum("mi,mij,mj->m", e0, minv, e0))
        Bs.append(np.einsum("mi,mij,mj->m", e0, minv, d))
        Cs.append(np.einsum("mi,mij,mj->m", d, minv, d))
        tgt.append(mesh.triangles[:, k])
        ka.append(mesh.triangles[:, a])
        kb.append(mesh.triangles[:, b])
    cat = np.concatenate
    return _UpdateTable(cat(tgt), cat(ka), cat(kb), cat(As), cat(Bs), cat(Cs))


def fim_solve(mesh: TriangleSurfaceMesh, gt: GroundTruthField, sources, *, max_rounds: int = 1_000_000) -> np.ndarray:
    """Activation times (ms) from ``sources`` under the anisotropic eikonal equation.

    Active-list fast iterative method: all active vertices are relaxed from
    their incident triangles simultaneously, any vertex that decreases
    re-activates its neighbours, and the loop stops when nothing decreases.
    """
    sources = np.unique(np.atleast_1d(np.asarray(sources, dtype=np.int64)))
    if sources.size == 0:
        raise ValueError("at least one source vertex is required")
    upd = _build_updates(mesh, gt)
    adj = mesh.adjacency
    n = mesh.n_vertices
    T = np.full(n, np.inf)
    T[sources] = 0.0
    active = np.zeros(n, dtype=bool)
    active[np.unique(adj[sources].indices)] = True
    active[sources] = False
    rounds = 0
    while active.any():
        rounds += 1
        if rounds > max_rounds:
            raise EikonalError("fast iterative method did not converge")
        sel = np.flatnonzero(active[upd.target])
        cand = _update_candidates(T[upd.known_a[sel]], T[upd.known_b[sel]], upd.A[sel], upd.B[sel], upd.C[sel])
        new = T.copy()
        np.minimum.at(new, upd.target[sel], cand)
        changed = new < T
        T = new
        active[:] = False
        if changed.any():
            active[np.unique(adj[np.flatnonzero(changed)].indices)] = True
    unreachable = np.flatnonzero(~np.isfinite(T))
    if unreachable.size:
        raise EikonalError(f"{unreachable.size} vertices unreachable from the sources (e.g. vertex {unreachable[0]})")
    logger.debug("FIM converged after %d rounds", rounds)
    return T


def farthest_point_pacing(mesh: TriangleSurfaceMesh, n_sites: int, seed) -> np.ndarray:
    """Random first site, then greedy maximin over geodesic distance."""
    if n_sites < 1:
        raise ValueError("n_sites must be >= 1")
    if n_sites > mesh.n_vertices:
        raise ValueError(f"n_sites={n_sites} exceeds vertex count {mesh.n_vertices}")
    rng = np.random.default_rng(seed)
    sites = [int(rng.integers(mesh.n_vertices))]
    iso = isotropic_field(mesh, 1.0)
    dmin = np.full(mesh.n_vertices, np.inf)
    while len(sites) < n_sites:
        dmin = np.minimum(dmin, fim_solve(mesh, iso, [sites[-1]]))
        sites.append(int(np.argmax(dmin)))
    return np.array(sites, dtype=np.int64)


def sample_count(area: float, density: float) -> int:
    # the relative guard keeps floor(100 * 16) at 1600 when the summed area is 99.99999999999997
    return int(math.floor(area * density * (1.0 + 1e-12)))


def sample_measurements(solution, area: float, density: float, sigma: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Pick ``floor(A * density)`` distinct vertices and add N(0, sigma^2) noise."""
    if density <= 0:
        raise ValueError("density must be positive")
    if sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    solution = np.asarray(solution, dtype=float)
    n = sample_count(area, density)
    if n > len(solution):
        raise ValueError(f"{n} samples requested but mesh has {len(solution)} vertices; lower the density")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(solution), size=n, replace=False)
    noise = rng.normal(0.0, 1.0, size=n) * sigma
    return idx.astype(np.int64), solution[idx] + noise


# ----------------------------------------------------------------------------
# datasets
# ----------------------------------------------------------------------------
@dataclass
class ActivationMap:
    pacing_vertex: int
    full_solution: np.ndarray
    sample_vertices: np.ndarray
    sample_times: np.ndarray
    noise_sigma: float

    @property
    def t_max(self) -> float:
        return float(np.max(self.full_solution))


@dataclass
class ActivationDataset:
    maps: list[ActivationMap]
    density: float
    noise_sigma: float
    seed: int
    mesh_hash: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def n_maps(self) -> int:
        return len(self.maps)

    @property
    def t_max(self) -> np.ndarray:
        return np.array([m.t_max for m in self.maps])


def generate_dataset(mesh: TriangleSurfaceMesh, gt: GroundTruthField, n_maps: int = 3, density: float = 16.0,
                     sigma: float = 0.0, seed: int = 0) -> ActivationDataset:
    children = np.random.SeedSequence(seed).spawn(1 + n_maps)
    sites = farthest_point_pacing(mesh, n_maps, children[0])
    maps = []
    for i, site in enumerate(sites):
        sol = fim_solve(mesh, gt, [site])
        idx, times = sample_measurements(sol, mesh.total_area, density, sigma, children[1 + i])
        maps.append(ActivationMap(int(site), sol, idx, times, float(sigma)))
    return ActivationDataset(maps=maps, density=float(density), noise_sigma=float(sigma), seed=int(seed),
                             mesh_hash=mesh.content_hash)


def save_dataset(directory, ds: ActivationDataset, gt: GroundTruthField | None = None) -> None:
    """One ``map_<i>.csv`` (vertex_id,time_ms) per map plus ``manifest.json``.

    Full solutions (and the fiber field, if given) go to ``ground_truth.npz``.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(ds.maps):
        with open(d / f"map_{i}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["vertex_id", "time_ms"])
            for v, t in zip(m.sample_vertices.tolist(), m.sample_times.tolist()):
                w.writerow([v, repr(t)])
    manifest = {
        "mesh_hash": ds.mesh_hash,
        "pacing_sites": [m.pacing_vertex for m in ds.maps],
        "density": ds.density,
        "noise_sigma": ds.noise_sigma,
        "seed": ds.seed,
        "t_max": [m.t_max for m in ds.maps],
        "n_samples": [len(m.sample_vertices) for m in ds.maps],
        **ds.extra,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    arrays = {f"solution_{i}": m.full_solution for i, m in enumerate(ds.maps)}
    if gt is not None:
        arrays.update(fibers=gt.fibers, v_l=gt.v_l, v_t=gt.v_t, flagged=gt.flagged)
    write_npz(d / "ground_truth.npz", arrays)


def load_dataset(directory) -> tuple[ActivationDataset, dict]:
    """Inverse of :func:`save_dataset`; returns the dataset and ground-truth arrays."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    with np.load(d / "ground_truth.npz") as z:
        truth = {k: z[k] for k in z.files}
    maps = []
    for i, site in enumerate(manifest["pacing_sites"]):
        with open(d / f"map_{i}.csv", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        idx = np.array([int(r[0]) for r in rows], dtype=np.int64)
        times = np.array([float(r[1]) for r in rows])
        maps.append(ActivationMap(int(site), truth[f"solution_{i}"], idx, times, float(manifest["noise_sigma"])))
    known = {"mesh_hash", "pacing_sites", "density", "noise_sigma", "seed", "t_max", "n_samples"}
    ds = ActivationDataset(maps=maps, density=manifest["density"], noise_sigma=manifest["noise_sigma"],
                           seed=manifest["seed"], mesh_hash=manifest["mesh_hash"],
                           extra={k: v for k, v in manifest.items() if k not in known})
    return ds, truth
