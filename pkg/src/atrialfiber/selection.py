"""Collapse an ensemble of fiber predictions to one field and measure disagreement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import TensorHead, principal_fiber

__all__ = [
    "FiberSelectionResult",
    "fiber_distance",
    "medoid_index",
    "medoid_fiber",
    "disparity",
    "sym2_eig",
    "mean_tensor",
    "select_field",
    "select_from_heads",
]

METHODS = ("medoid", "mean_tensor")


def fiber_distance(v1, v2) -> np.ndarray:
    """``(1 - |v1 . v2|)^2`` for unit vectors (broadcasts over leading axes)."""
    c = np.abs(np.sum(np.asarray(v1, float) * np.asarray(v2, float), axis=-1))
    return (1.0 - np.minimum(c, 1.0)) ** 2


def _median_last(x):
    # even counts average the two central order statistics
    return np.median(x, axis=-1)


def medoid_index(fibers) -> np.ndarray:
    """Index of the member minimising the median distance to all members.

    ``fibers`` is ``(..., S, 3)``. The candidate's own zero distance is part
    of the median. Ties go to the lowest member index.
    """
    f = np.asarray(fibers, dtype=float)
    d = fiber_distance(f[..., :, None, :], f[..., None, :, :])  # (..., S, S)
    med = _median_last(d)
    return np.argmin(med, axis=-1)


def medoid_fiber(fibers) -> np.ndarray:
    f = np.asarray(fibers, dtype=float)
    k = medoid_index(f)
    return np.take_along_axis(f, k[..., None, None], axis=-2)[..., 0, :]


def disparity(selected, fibers) -> np.ndarray:
    """``arccos(mean_k |f* . f_k|)`` in radians."""
    c = np.abs(np.sum(np.asarray(selected, float)[..., None, :] * np.asarray(fibers, float), axis=-1))
    mean = np.mean(c, axis=-1)
    # unit vectors dotted with themselves land a few ulp off 1, and arccos
    # turns that into ~1e-8 rad; snap those to exactly parallel
    mean = np.where(mean >= 1.0 - 8 * np.finfo(float).eps, 1.0, mean)
    return np.arccos(np.clip(mean, -1.0, 1.0))


def sym2_eig(m):
    """Closed-form eigen-decomposition of symmetric 2x2 matrices.

    Returns ascending eigenvalues ``(..., 2)`` and the principal-axis angle
    ``theta`` so that ``(cos theta, sin theta)`` is the eigenvector of the
    larger eigenvalue.
    """
    m = np.asarray(m, dtype=float)
    a, b, c = m[..., 0, 0], m[..., 0, 1], m[..., 1, 1]
    mean = 0.5 * (a + c)
    half = 0.5 * (a - c)
    rad = np.hypot(half, b)
    theta = 0.5 * np.arctan2(2.0 * b, a - c)
    return np.stack([mean - rad, mean + rad], axis=-1), theta


def _sym2_from_eig(lo, hi, theta):
    c, s = np.cos(theta), np.sin(theta)
    out = np.empty(np.shape(lo) + (2, 2))
    out[..., 0, 0] = hi * c * c + lo * s * s
    out[..., 1, 1] = hi * s * s + lo * c * c
    out[..., 0, 1] = out[..., 1, 0] = (hi - lo) * c * s
    return out


def _rotations(a):
    a = np.asarray(a, dtype=float)
    s = np.sqrt(np.clip(1.0 - a * a, 0.0, 1.0))
    R = np.empty(a.shape + (2, 2))
    R[..., 0, 0] = a
    R[..., 0, 1] = -s
    R[..., 1, 0] = s
    R[..., 1, 1] = a
    return R


def mean_tensor(heads: TensorHead, isotropy_tol: float = 1e-12):
    """Log-Euclidean mean over the member axis (last axis of the head arrays).

    Returns ``(M, angle, isotropic)``: the 2x2 SPD mean, the in-plane angle of
    its principal eigenvector (from p1, in [0, pi)) and a flag where the two
    eigenvalues coincide and no direction is defined.
    """
    a = np.asarray(heads.a, dtype=float)
    R = _rotations(a)
    logs = np.zeros(a.shape + (2, 2))
    logs[..., 0, 0] = np.log(heads.e1)
    logs[..., 1, 1] = np.log(heads.e2)
    rl = R @ logs @ np.swapaxes(R, -1, -2)
    # summing in sorted order makes the mean exactly independent of member order
    L = np.mean(np.sort(rl, axis=-3), axis=-3)
    ev, theta = sym2_eig(L)
    lo, hi = ev[..., 0], ev[..., 1]
    M = _sym2_from_eig(np.exp(lo), np.exp(hi), theta)
    isotropic = (hi - lo) <= isotropy_tol * np.maximum(1.0, np.abs(hi))
    angle = np.mod(theta, np.pi)
    angle = np.where(isotropic, 0.0, angle)
    return M, angle, isotropic


@dataclass
class FiberSelectionResult:
    method: str
    fibers: np.ndarray  # (V, 3)
    speeds_sq: np.ndarray  # (V, 2) selected (e1, e2) or mean-tensor eigenvalues (major, minor)
    disparity: np.ndarray  # (V,) radians
    member_fibers: np.ndarray  # (V, S, 3)
    isotropic: np.ndarray  # (V,) bool


def select_from_heads(heads: TensorHead, p1, p2, method: str = "medoid") -> FiberSelectionResult:
    """Selection from per-vertex member heads with arrays shaped ``(V, S)``."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    member = principal_fiber(heads, p1[:, None, :], p2[:, None, :])  # (V, S, 3)
    n_v = member.shape[0]
    if method == "medoid":
        k = medoid_index(member)
        chosen = np.take_along_axis(member, k[:, None, None], axis=1)[:, 0]
        e1 = np.take_along_axis(np.asarray(heads.e1), k[:, None], axis=1)[:, 0]
        e2 = np.take_along_axis(np.asarray(heads.e2), k[:, None], axis=1)[:, 0]
        speeds = np.stack([e1, e2], axis=-1)
        iso = np.zeros(n_v, dtype=bool)
    else:
        M, angle, iso = mean_tensor(heads)
        chosen = np.cos(angle)[:, None] * p1 + np.sin(angle)[:, None] * p2
        ev, _ = sym2_eig(M)
        speeds = ev[:, ::-1]
    return FiberSelectionResult(method, chosen, speeds, disparity(chosen, member), member, iso)


def select_field(state, problem, method: str = "medoid") -> FiberSelectionResult:
    """Per-vertex selection for a trained ensemble."""
    from .pinn import predict_vertex_heads

    h = predict_vertex_heads(state, problem)  # arrays (S, V)
    heads = TensorHead(a=h.a.T, e1=h.e1.T, e2=h.e2.T)
    mesh = problem.mesh
    return select_from_heads(heads, mesh.vertex_p1, mesh.vertex_p2, method)
