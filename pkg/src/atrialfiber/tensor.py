"""Conduction-velocity tensor parameterisation ``d = [a, e1, e2]``.

``a`` is the cosine of the fiber angle in the tangent basis (p1, p2), ``e1``
and ``e2`` are squared longitudinal and transverse speeds in cm^2/ms^2. The
sine is taken non-negative, so angles live in [0, pi], which covers every
unoriented direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "E_MIN",
    "E_SCALE",
    "TensorHead",
    "head_squash",
    "softplus",
    "assemble_local",
    "project_global",
    "fiber_vector",
    "transverse_vector",
    "principal_fiber",
    "head_from_fiber",
]

E_MIN = 0.01 ** 2
# raw = 0 maps to a speed of 0.05 cm/ms
E_SCALE = (0.05 ** 2 - E_MIN) / np.log(2.0)


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.logaddexp(0.0, x)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class TensorHead:
    a: np.ndarray
    e1: np.ndarray
    e2: np.ndarray

    @property
    def sin(self) -> np.ndarray:
        return np.sqrt(np.clip(1.0 - np.asarray(self.a) ** 2, 0.0, 1.0))

    def as_array(self) -> np.ndarray:
        return np.stack([np.asarray(self.a), np.asarray(self.e1), np.asarray(self.e2)], axis=-1)


def head_squash(raw) -> TensorHead:
    """Map unconstrained ``(..., 3)`` network outputs to a valid head."""
    raw = np.asarray(raw, dtype=float)
    return TensorHead(
        a=np.tanh(raw[..., 0]),
        e1=E_MIN + E_SCALE * softplus(raw[..., 1]),
        e2=E_MIN + E_SCALE * softplus(raw[..., 2]),
    )


def head_from_fiber(angle, v_l, v_t) -> TensorHead:
    """Head for a fiber at ``angle`` in [0, pi] from p1 with the given speeds."""
    angle, v_l, v_t = np.broadcast_arrays(np.asarray(angle, float), np.asarray(v_l, float), np.asarray(v_t, float))
    return TensorHead(a=np.cos(angle), e1=v_l ** 2, e2=v_t ** 2)


def assemble_local(head: TensorHead) -> np.ndarray:
    """2x2 tensor R diag(e1, e2) R^T in the tangent basis."""
    a = np.asarray(head.a, dtype=float)
    s = head.sin
    e1, e2 = np.asarray(head.e1, float), np.asarray(head.e2, float)
    out = np.empty(np.broadcast(a, e1, e2).shape + (2, 2))
    out[..., 0, 0] = a * a * e1 + s * s * e2
    out[..., 1, 1] = s * s * e1 + a * a * e2
    out[..., 0, 1] = out[..., 1, 0] = a * s * (e1 - e2)
    return out


def project_global(local, p1, p2) -> np.ndarray:
    """Lift a 2x2 tangent tensor to 3D: ``P D_B P^T`` with ``P = [p1 p2]``.

    The normal row/column is never formed, so ``D n = 0`` up to the
    orthogonality of the frame.
    """
    P = np.stack([np.asarray(p1, float), np.asarray(p2, float)], axis=-1)  # (..., 3, 2)
    return P @ np.asarray(local) @ np.swapaxes(P, -1, -2)


def fiber_vector(head: TensorHead, p1, p2) -> np.ndarray:
    a = np.asarray(head.a, float)[..., None]
    return a * np.asarray(p1, float) + head.sin[..., None] * np.asarray(p2, float)


def transverse_vector(head: TensorHead, p1, p2) -> np.ndarray:
    a = np.asarray(head.a, float)[..., None]
    return -head.sin[..., None] * np.asarray(p1, float) + a * np.asarray(p2, float)


def principal_fiber(head: TensorHead, p1, p2) -> np.ndarray:
    """Direction of fastest conduction: l if e1 >= e2, otherwise t."""
    l = fiber_vector(head, p1, p2)
    t = transverse_vector(head, p1, p2)
    swap = (np.asarray(head.e1) < np.asarray(head.e2))[..., None]
    return np.where(swap, t, l)
