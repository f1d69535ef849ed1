"""Ensemble PINN for activation maps and the conduction tensor field.

Every ensemble member owns one tensor network (outputs the raw head
``[a, e1, e2]``) and one network per activation map, each paired with a
frozen prior network. All members share weights-layout so the whole ensemble
is stored as stacked arrays: tensor networks ``(S, ...)``, map networks
``(S, N, ...)``.

Two input modes:

``delta``
    inputs are the scaled Laplace-Beltrami eigenfunctions; spatial gradients
    come from linear FEM on collocation triangles.
``fibernet``
    inputs are bounding-box normalised coordinates; spatial gradients come
    from the exact input Jacobian of the networks.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from types import SimpleNamespace
from typing import Callable

import numpy as np

from . import nn
from ._npz import write_npz
from .eikonal import ActivationDataset
from .mesh import TriangleSurfaceMesh
from .spectral import SpectralBasis
from .tensor import E_MIN, E_SCALE, TensorHead, head_squash, sigmoid, softplus

__all__ = [
    "TrainingConfig",
    "PinnProblem",
    "EnsembleState",
    "LossTerms",
    "huber",
    "init_ensemble",
    "network_input",
    "evaluate_losses",
    "default_workers",
    "loss_data",
    "loss_eikonal",
    "loss_smoothness",
    "loss_total",
    "loss_ensemble",
    "predict_map",
    "predict_head",
    "predict_vertex_maps",
    "predict_vertex_heads",
    "sample_collocation",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MODES = ("delta", "fibernet")
TERM_NAMES = ("data", "eiko", "cv", "ang")


@dataclass
class TrainingConfig:
    mode: str = "delta"
    lambda_data: float = 1e-1
    lambda_eiko: float = 1e-4
    lambda_cv: float = 1e-5
    lambda_ang: float = 1e-8
    delta_e: float = 1.0
    delta_a: float = 1.0
    ensemble_size: int = 20
    prior_scale: float = 1e-3
    batch: int = 64
    iterations: int = 50_000
    n_eigen: int = 10
    map_hidden: tuple = (20, 20, 20, 20, 20)
    tensor_hidden: tuple = (20, 20, 20, 20, 20, 20, 20)
    learning_rate: float = 1e-3
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("lambda_data", "lambda_eiko", "lambda_cv", "lambda_ang"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.delta_e <= 0 or self.delta_a <= 0:
            raise ValueError("Huber thresholds must be positive")
        if self.batch < 1 or self.ensemble_size < 1 or self.iterations < 0:
            raise ValueError("batch and ensemble_size must be >= 1, iterations >= 0")
        self.map_hidden = tuple(int(h) for h in self.map_hidden)
        self.tensor_hidden = tuple(int(h) for h in self.tensor_hidden)

    @classmethod
    def delta_fibernet(cls, **kw) -> "TrainingConfig":
        return cls(**{"mode": "delta", "lambda_data": 1e-1, "lambda_eiko": 1e-4,
                      "lambda_cv": 1e-5, "lambda_ang": 1e-8, **kw})

    @classmethod
    def fibernet(cls, **kw) -> "TrainingConfig":
        return cls(**{"mode": "fibernet", "lambda_data": 1e-1, "lambda_eiko": 1e-3,
                      "lambda_cv": 1e-5, "lambda_ang": 1e-9, **kw})

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.lambda_data, self.lambda_eiko, self.lambda_cv, self.lambda_ang])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["map_hidden"] = list(self.map_hidden)
        d["tensor_hidden"] = list(self.tensor_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def huber(q, delta: float):
    """Huber penalty of vector norms along the last axis."""
    n = np.linalg.norm(q, axis=-1)
    return np.where(n <= delta, n * n / (2.0 * delta), n - 0.5 * delta)


def _huber_with_grad(q, delta):
    n = np.linalg.norm(q, axis=-1)
    inside = n <= delta
    val = np.where(inside, n * n / (2.0 * delta), n - 0.5 * delta)
    denom = np.where(inside, delta, np.where(n > 0, n, 1.0))
    return val, q / denom[..., None]


# ----------------------------------------------------------------------------
# problem setup
# ----------------------------------------------------------------------------
class PinnProblem:
    """Read-only training data: mesh geometry, inputs and normalised samples."""

    def __init__(self, mesh: TriangleSurfaceMesh, dataset: ActivationDataset, mode: str = "delta",
                 basis: SpectralBasis | None = None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "delta" and basis is None:
            raise ValueError("delta mode needs a spectral basis")
        self.mesh = mesh
        self.mode = mode
        self.basis = basis
        self.dataset = dataset
        lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
        self.box_center = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        # flat geometries have a zero-extent axis; leave it unscaled
        self.box_half = np.where(half > 1e-12, half, 1.0)
        if mode == "delta":
            self.vertex_inputs = basis.embedding
        else:
            self.vertex_inputs = (mesh.vertices - self.box_center) / self.box_half
        self.centroid_inputs = self.vertex_inputs[mesh.triangles].mean(axis=1)
        self.n_inputs = self.vertex_inputs.shape[1]

        n = dataset.n_maps
        if n == 0:
            raise ValueError("dataset has no activation maps")
        counts = [len(m.sample_vertices) for m in dataset.maps]
        if min(counts) == 0:
            raise ValueError("activation map without samples")
        p = max(counts)
        self.sample_index = np.zeros((n, p), dtype=np.int64)
        self.sample_target = np.zeros((n, p))
        self.sample_weight = np.zeros((n, p))
        self.t_max = dataset.t_max.astype(float)
        for i, m in enumerate(dataset.maps):
            k = len(m.sample_vertices)
            self.sample_index[i, :k] = m.sample_vertices
            self.sample_target[i, :k] = m.sample_times / self.t_max[i]
            self.sample_weight[i, :k] = 1.0 / (n * k)
        self.data_inputs = self.vertex_inputs[self.sample_index]  # (N, P, n_in)
        self.tangent_frames = mesh.element_tangent_frames  # (T, 2, 3)
        self.tangent_grad = mesh.tangent_gradient_operators  # (T, 2, 3)

    @property
    def n_maps(self) -> int:
        return self.dataset.n_maps


def network_input(problem: PinnProblem, vertex: int | None = None, element: int | None = None,
                  weights=None) -> np.ndarray:
    """Network input at a vertex, or at a barycentric point of an element
    (centroid by default)."""
    if vertex is not None:
        return problem.vertex_inputs[vertex]
    w = np.full(3, 1.0 / 3.0) if weights is None else np.asarray(weights, float)
    return np.tensordot(w, problem.vertex_inputs[problem.mesh.triangles[element]], axes=(0, 0))


# ----------------------------------------------------------------------------
# ensemble state
# ----------------------------------------------------------------------------
@dataclass
class EnsembleState:
    config: TrainingConfig
    tensor: nn.MlpParams
    maps: nn.MlpParams
    tensor_prior: nn.MlpParams
    maps_prior: nn.MlpParams
    adam: nn.AdamState
    batch_rng: np.random.Generator
    iteration: int = 0
    history: list = field(default_factory=list)
    # prior outputs cached on the fixed evaluation points
    prior_cache: dict = field(default_factory=dict, repr=False)

    @property
    def size(self) -> int:
        return self.tensor.batch_shape[0]

    def trainable_arrays(self) -> list[np.ndarray]:
        return self.tensor.arrays() + self.maps.arrays()

    def prior_checksum(self) -> str:
        h = hashlib.sha256()
        for a in self.tensor_prior.arrays() + self.maps_prior.arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def _member_seeds(seed: int, k: int, n_maps: int):
    ss = np.random.SeedSequence([int(seed), int(k)])
    return ss.spawn(2 + 2 * n_maps)


def init_ensemble(problem: PinnProblem, config: TrainingConfig) -> EnsembleState:
    """Glorot-initialise ``S`` independent members; member k depends only on (seed, k)."""
    if config.mode != problem.mode:
        raise ValueError(f"config mode {config.mode!r} does not match problem mode {problem.mode!r}")
    n_in, n_maps = problem.n_inputs, problem.n_maps
    tdims = [n_in, *config.tensor_hidden, 3]
    mdims = [n_in, *config.map_hidden, 1]
    tensors, tpriors, maps, mpriors = [], [], [], []
    for k in range(config.ensemble_size):
        seeds = _member_seeds(config.seed, k, n_maps)
        tensors.append(nn.glorot_init(tdims, seeds[0]))
        tpriors.append(nn.glorot_init(tdims, seeds[1]))
        maps.append(nn.stack_params([nn.glorot_init(mdims, seeds[2 + 2 * i]) for i in range(n_maps)]))
        mpriors.append(nn.stack_params([nn.glorot_init(mdims, seeds[3 + 2 * i]) for i in range(n_maps)]))
    tensor = nn.stack_params(tensors)
    mp = nn.stack_params(maps)
    adam = nn.AdamState.zeros_like(tensor.arrays() + mp.arrays(), lr=config.learning_rate)
    batch_rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 2 ** 32 - 1]))
    state = EnsembleState(config, tensor, mp, nn.stack_params(tpriors), nn.stack_params(mpriors), adam, batch_rng)
    _fill_prior_cache(state, problem)
    return state


def _fill_prior_cache(state: EnsembleState, problem: PinnProblem) -> None:
    lp = state.config.prior_scale
    xv, xc = problem.vertex_inputs, problem.centroid_inputs
    cache = {
        "map_v": lp * nn.forward_cached(state.maps_prior, xv)[0][..., 0],  # (S, N, V)
        "tensor_v": lp * nn.forward_cached(state.tensor_prior, xv)[0],  # (S, V, 3)
        "tensor_c": lp * nn.forward_cached(state.tensor_prior, xc)[0],  # (S, T, 3)
    }
    if problem.mode == "fibernet":
        _, jm, _ = nn.forward_jacobian(state.maps_prior, xc)
        _, jt, _ = nn.forward_jacobian(state.tensor_prior, xc)
        cache["map_jc"] = lp * jm[..., 0]  # (S, N, T, 3)
        cache["tensor_jc"] = lp * jt  # (S, T, 3, 3)
    state.prior_cache = cache


# ----------------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------------
@dataclass
class LossTerms:
    """Per-member loss values ``(S,)`` for each term and optional gradients of
    ``sum_k sum_t w_t L_t^k`` w.r.t. the stacked trainable parameters."""

    data: np.ndarray
    eiko: np.ndarray
    cv: np.ndarray
    ang: np.ndarray
    grad_tensor: nn.MlpParams | None = None
    grad_maps: nn.MlpParams | None = None

    def stacked(self) -> np.ndarray:
        return np.stack([self.data, self.eiko, self.cv, self.ang], axis=-1)

    def total(self, weights) -> np.ndarray:
        return self.stacked() @ np.asarray(weights, dtype=float)


def _head_parts(raw):
    a = np.tanh(raw[..., 0])
    s = 1.0 / np.cosh(raw[..., 0])
    sig1, sig2 = sigmoid(raw[..., 1]), sigmoid(raw[..., 2])
    e1 = E_MIN + E_SCALE * softplus(raw[..., 1])
    e2 = E_MIN + E_SCALE * softplus(raw[..., 2])
    return a, s, e1, e2, sig1, sig2


def _eikonal_core(g, raw_c, t_max, w_eiko, need_grad):
    """Residual of ``T sqrt(D grad phi . grad phi) - 1`` on tangent gradients.

    ``g`` is ``(S, N, C, 2)`` in the element tangent frames, ``raw_c`` the
    raw heads ``(S, C, 3)`` at the same points.
    """
    S, N, C, _ = g.shape
    a, s, e1, e2, sig1, sig2 = _head_parts(raw_c)
    a_, s_, e1_, e2_ = a[:, None], s[:, None], e1[:, None], e2[:, None]
    g1, g2 = g[..., 0], g[..., 1]
    u = a_ * g1 + s_ * g2
    w = -s_ * g1 + a_ * g2
    q = e1_ * u * u + e2_ * w * w
    sq = np.sqrt(q)
    tm = t_max[None, :, None]
    r = tm * sq - 1.0
    value = np.mean(r * r, axis=(1, 2))
    if not need_grad:
        return value, None, None
    if not np.all(np.isfinite(r)):
        bad = np.argwhere(~np.isfinite(r))[0]
        raise nn.NumericalError(f"non-finite eikonal residual at collocation slot {int(bad[2])}")
    dr = w_eiko * 2.0 * r / (N * C)
    dq = np.where(sq > 0, dr * tm / (2.0 * np.where(sq > 0, sq, 1.0)), 0.0)
    du = dq * 2.0 * e1_ * u
    dw = dq * 2.0 * e2_ * w
    de1 = np.sum(dq * u * u, axis=1)
    de2 = np.sum(dq * w * w, axis=1)
    dg = np.stack([du * a_ - dw * s_, du * s_ + dw * a_], axis=-1)
    da = np.sum(du * g1 + dw * g2, axis=1)
    ds = np.sum(du * g2 - dw * g1, axis=1)
    draw = np.stack([
        da * (1.0 - a * a) - ds * a * s,
        de1 * E_SCALE * sig1,
        de2 * E_SCALE * sig2,
    ], axis=-1)
    return value, dg, draw


def _collocation_operator(problem: PinnProblem, coll: np.ndarray):
    """Unique vertices of the batch and the dense ``(C, 2, |U|)`` gradient operator."""
    tri = problem.mesh.triangles[coll]
    uniq, inv = np.unique(tri, return_inverse=True)
    inv = inv.reshape(tri.shape)
    C = len(coll)
    op = np.zeros((C, 2, len(uniq)))
    G = problem.tangent_grad[coll]
    rows = np.arange(C)
    for k in range(3):
        np.add.at(op, (rows, slice(None), inv[:, k]), G[:, :, k])
    return uniq, op


def evaluate_losses(state: EnsembleState, problem: PinnProblem, coll, weights=None,
                    need_grad: bool = True, workers: int | None = None) -> LossTerms:
    """All four loss terms for every member on collocation triangles ``coll``.

    Members are independent, so they may be evaluated on ``workers`` threads
    (numpy releases the GIL in the heavy kernels). Results are gathered in
    member order and do not depend on the thread count.
    """
    cfg = state.config
    w = cfg.weights if weights is None else np.asarray(weights, dtype=float)
    coll = np.asarray(coll, dtype=np.int64)
    colop = _collocation_operator(problem, coll) if problem.mode == "delta" else None
    # one member at a time keeps the per-layer work arrays cache-resident
    def one(k):
        sub = _member_view(state, k)
        if colop is not None:
            return _evaluate_delta(sub, problem, coll, w, need_grad, colop)
        return _evaluate_fibernet(sub, problem, coll, w, need_grad)

    n_workers = min(state.size, default_workers() if workers is None else max(1, int(workers)))
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            parts = list(pool.map(one, range(state.size)))
    else:
        parts = [one(k) for k in range(state.size)]
    return _concat_terms(parts)


def default_workers() -> int:
    """Thread count for member evaluation: ``ATRIALFIBER_WORKERS`` or the CPU count."""
    env = os.environ.get("ATRIALFIBER_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _member_view(state: EnsembleState, k: int) -> SimpleNamespace:
    sl = slice(k, k + 1)
    return SimpleNamespace(
        config=state.config,
        size=1,
        maps=state.maps.member(sl),
        tensor=state.tensor.member(sl),
        prior_cache={name: v[sl] for name, v in state.prior_cache.items()},
    )


def _concat_terms(parts: list[LossTerms]) -> LossTerms:
    out = LossTerms(*(np.concatenate([getattr(p, name) for p in parts]) for name in TERM_NAMES))
    if parts[0].grad_tensor is not None:
        for name in ("grad_tensor", "grad_maps"):
            arrays = [np.concatenate(a) for a in zip(*(getattr(p, name).arrays() for p in parts))]
            setattr(out, name, nn.MlpParams.from_arrays(arrays, parts[0].grad_tensor.activation))
    return out


def _data_term(problem, phi_data, w_data, need_grad):
    resid = phi_data - problem.sample_target
    value = np.sum(problem.sample_weight * resid * resid, axis=(1, 2))
    grad = 2.0 * w_data * problem.sample_weight * resid if need_grad else None
    return value, grad


def _smooth_terms(grad_e1, grad_e2, grad_a, cfg, w_cv, w_ang, need_grad):
    C = grad_e1.shape[-2]
    h1, d1 = _huber_with_grad(grad_e1, cfg.delta_e)
    h2, d2 = _huber_with_grad(grad_e2, cfg.delta_e)
    ha, da = _huber_with_grad(grad_a, cfg.delta_a)
    cv = np.mean(h1 + h2, axis=-1)
    ang = np.mean(ha, axis=-1)
    if not need_grad:
        return cv, ang, None
    return cv, ang, (d1 * (w_cv / C), d2 * (w_cv / C), da * (w_ang / C))


def _evaluate_delta(state, problem, coll, w, need_grad, colop):
    cfg = state.config
    cache = state.prior_cache
    S, N = state.size, problem.n_maps
    P = problem.sample_index.shape[1]
    uniq, op = colop
    nu = len(uniq)

    # activation-map networks on samples + collocation vertices
    x_u = np.broadcast_to(problem.vertex_inputs[uniq], (N, nu, problem.n_inputs))
    x_maps = np.concatenate([problem.data_inputs, x_u], axis=1)
    out, mcache = nn.forward_cached(state.maps, x_maps)
    idx = np.concatenate([problem.sample_index, np.broadcast_to(uniq, (N, nu))], axis=1)
    phi = out[..., 0] + np.take_along_axis(cache["map_v"], np.broadcast_to(idx, (S, N, P + nu)), axis=2)
    data, g_data = _data_term(problem, phi[..., :P], w[0], need_grad)
    phi_u = phi[..., P:]
    g = np.einsum("cau,snu->snca", op, phi_u)

    # tensor networks on collocation vertices + centroids
    x_t = np.concatenate([problem.vertex_inputs[uniq], problem.centroid_inputs[coll]], axis=0)
    raw, tcache = nn.forward_cached(state.tensor, x_t)
    raw = raw + np.concatenate([cache["tensor_v"][:, uniq], cache["tensor_c"][:, coll]], axis=1)
    raw_u, raw_c = raw[:, :nu], raw[:, nu:]

    eiko, dg, draw_c = _eikonal_core(g, raw_c, problem.t_max, w[1], need_grad)

    a_u, _, e1_u, e2_u, sig1_u, sig2_u = _head_parts(raw_u)
    ge1 = np.einsum("cau,su->sca", op, e1_u)
    ge2 = np.einsum("cau,su->sca", op, e2_u)
    ga = np.einsum("cau,su->sca", op, a_u)
    cv, ang, dsmooth = _smooth_terms(ge1, ge2, ga, cfg, w[2], w[3], need_grad)
    terms = LossTerms(data, eiko, cv, ang)
    if not need_grad:
        return terms

    d1, d2, da = dsmooth
    draw_u = np.stack([
        np.einsum("cau,sca->su", op, da) * (1.0 - a_u * a_u),
        np.einsum("cau,sca->su", op, d1) * E_SCALE * sig1_u,
        np.einsum("cau,sca->su", op, d2) * E_SCALE * sig2_u,
    ], axis=-1)
    g_raw = np.concatenate([draw_u, draw_c], axis=1)
    terms.grad_tensor = nn.backward(state.tensor, tcache, g_raw)

    g_phi = np.empty_like(phi)
    g_phi[..., :P] = g_data
    g_phi[..., P:] = np.einsum("cau,snca->snu", op, dg)
    terms.grad_maps = nn.backward(state.maps, mcache, g_phi[..., None])
    return terms


def _evaluate_fibernet(state, problem, coll, w, need_grad):
    cfg = state.config
    cache = state.prior_cache
    S, N = state.size, problem.n_maps
    P = problem.sample_index.shape[1]
    inv_half = 1.0 / problem.box_half
    frames = problem.tangent_frames[coll]  # (C, 2, 3)

    out, mcache = nn.forward_cached(state.maps, problem.data_inputs)
    phi = out[..., 0] + np.take_along_axis(cache["map_v"], np.broadcast_to(problem.sample_index, (S, N, P)), axis=2)
    data, g_data = _data_term(problem, phi, w[0], need_grad)

    xc = problem.centroid_inputs[coll]
    _, jm, jcache = nn.forward_jacobian(state.maps, xc)
    jphi = jm[..., 0] + cache["map_jc"][:, :, coll]  # (S, N, C, 3) w.r.t. normalised input
    g = np.einsum("cai,snci->snca", frames, jphi * inv_half)

    raw, jt, tcache = nn.forward_jacobian(state.tensor, xc)
    raw = raw + cache["tensor_c"][:, coll]
    jraw = jt + cache["tensor_jc"][:, coll]  # (S, C, 3in, 3out)

    eiko, dg, draw_c = _eikonal_core(g, raw, problem.t_max, w[1], need_grad)

    a, _, _, _, sig1, sig2 = _head_parts(raw)
    t = np.einsum("cai,scio->scoa", frames, jraw * inv_half[None, None, :, None])  # (S, C, 3out, 2)
    ge1 = (E_SCALE * sig1)[..., None] * t[:, :, 1]
    ge2 = (E_SCALE * sig2)[..., None] * t[:, :, 2]
    ga = (1.0 - a * a)[..., None] * t[:, :, 0]
    cv, ang, dsmooth = _smooth_terms(ge1, ge2, ga, cfg, w[2], w[3], need_grad)
    terms = LossTerms(data, eiko, cv, ang)
    if not need_grad:
        return terms

    d1, d2, da = dsmooth
    draw = draw_c.copy()
    draw[..., 0] += np.sum(da * t[:, :, 0], axis=-1) * (-2.0 * a * (1.0 - a * a))
    draw[..., 1] += np.sum(d1 * t[:, :, 1], axis=-1) * E_SCALE * sig1 * (1.0 - sig1)
    draw[..., 2] += np.sum(d2 * t[:, :, 2], axis=-1) * E_SCALE * sig2 * (1.0 - sig2)
    dt = np.stack([
        da * (1.0 - a * a)[..., None],
        d1 * (E_SCALE * sig1)[..., None],
        d2 * (E_SCALE * sig2)[..., None],
    ], axis=2)  # (S, C, 3out, 2)
    djraw = np.einsum("cai,scoa->scio", frames, dt) * inv_half[None, None, :, None]
    terms.grad_tensor = nn.backward_jacobian(state.tensor, tcache, draw, djraw)

    gm_data = nn.backward(state.maps, mcache, g_data[..., None])
    djphi = np.einsum("cai,snca->snci", frames, dg) * inv_half
    gm_coll = nn.backward_jacobian(state.maps, jcache, None, djphi[..., None])
    terms.grad_maps = nn.MlpParams.from_arrays([x + y for x, y in zip(gm_data.arrays(), gm_coll.arrays())])
    return terms


def _member_terms(state, problem, coll, member):
    terms = evaluate_losses(state, problem, coll, need_grad=False)
    return terms.stacked()[member]


def loss_data(state: EnsembleState, problem: PinnProblem, member: int) -> float:
    coll = np.arange(min(1, problem.mesh.n_triangles))
    return float(_member_terms(state, problem, coll, member)[0])


def loss_eikonal(state: EnsembleState, problem: PinnProblem, member: int, coll) -> float:
    return float(_member_terms(state, problem, coll, member)[1])


def loss_smoothness(state: EnsembleState, problem: PinnProblem, member: int, coll) -> tuple[float, float]:
    t = _member_terms(state, problem, coll, member)
    return float(t[2]), float(t[3])


def loss_total(state: EnsembleState, problem: PinnProblem, member: int, coll) -> float:
    return float(_member_terms(state, problem, coll, member) @ state.config.weights)


def loss_ensemble(state: EnsembleState, problem: PinnProblem, coll) -> float:
    terms = evaluate_losses(state, problem, coll, need_grad=False)
    return float(np.mean(terms.total(state.config.weights)))


# ----------------------------------------------------------------------------
# prediction
# ----------------------------------------------------------------------------
def predict_map(state: EnsembleState, member: int, map_index: int, inputs) -> np.ndarray:
    """Normalised activation time at arbitrary network inputs ``(P, n_in)``."""
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    pm = state.maps.member((member, map_index))
    pp = state.maps_prior.member((member, map_index))
    out = nn.forward(pm, x)[..., 0] + state.config.prior_scale * nn.forward(pp, x)[..., 0]
    return out if np.ndim(inputs) > 1 else out[0]


def predict_head(state: EnsembleState, member: int, inputs) -> TensorHead:
    """Head at network inputs; the prior is added before squashing."""
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    raw = nn.forward(state.tensor.member(member), x) + state.config.prior_scale * nn.forward(
        state.tensor_prior.member(member), x)
    if np.ndim(inputs) == 1:
        raw = raw[0]
    return head_squash(raw)


def predict_vertex_maps(state: EnsembleState, problem: PinnProblem) -> np.ndarray:
    """Activation times in ms at all vertices, ``(S, N, V)``."""
    out = nn.forward_cached(state.maps, problem.vertex_inputs)[0][..., 0] + state.prior_cache["map_v"]
    return out * problem.t_max[None, :, None]


def predict_vertex_heads(state: EnsembleState, problem: PinnProblem) -> TensorHead:
    raw = nn.forward_cached(state.tensor, problem.vertex_inputs)[0] + state.prior_cache["tensor_v"]
    return head_squash(raw)


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------
def sample_collocation(rng: np.random.Generator, n_triangles: int, batch: int) -> np.ndarray:
    return rng.choice(n_triangles, size=batch, replace=batch > n_triangles)


def train(state: EnsembleState, problem: PinnProblem, iterations: int | None = None,
          progress: Callable[[dict], None] | None = None, workers: int | None = None) -> EnsembleState:
    """Run Adam on the ensemble loss; mutates and returns ``state``.

    One collocation batch is drawn per iteration and shared by all members.
    Every ``log_every`` iterations the ensemble-mean loss terms are appended
    to ``state.history`` and passed to ``progress``.
    """
    cfg = state.config
    n_iter = cfg.iterations if iterations is None else iterations
    params = state.trainable_arrays()
    inv_s = 1.0 / state.size
    for _ in range(n_iter):
        coll = sample_collocation(state.batch_rng, problem.mesh.n_triangles, cfg.batch)
        terms = evaluate_losses(state, problem, coll, workers=workers)
        values = terms.stacked()
        if not np.all(np.isfinite(values)):
            raise nn.NumericalError(f"non-finite loss at iteration {state.iteration}")
        grads = [g * inv_s for g in terms.grad_tensor.arrays() + terms.grad_maps.arrays()]
        nn.adam_step(state.adam, params, grads, iteration=state.iteration)
        state.iteration += 1
        if state.iteration % cfg.log_every == 0 or state.iteration == 1:
            mean = values.mean(axis=0)
            rec = {"iteration": state.iteration, **{k: float(v) for k, v in zip(TERM_NAMES, mean)},
                   "total": float(mean @ cfg.weights)}
            state.history.append(rec)
            if progress is not None:
                progress(rec)
    return state


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------
def _rng_state_json(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, sort_keys=True)


def save_checkpoint(path, state: EnsembleState) -> None:
    arrays = {}
    for name, p in (("tensor", state.tensor), ("maps", state.maps),
                    ("tensor_prior", state.tensor_prior), ("maps_prior", state.maps_prior)):
        for i, a in enumerate(p.arrays()):
            arrays[f"{name}_{i}"] = a
    for i, (m, v) in enumerate(zip(state.adam.m, state.adam.v)):
        arrays[f"adam_m_{i}"] = m
        arrays[f"adam_v_{i}"] = v
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "config_hash": state.config.digest(),
        "iteration": state.iteration,
        "adam_step": state.adam.step,
        "batch_rng": json.loads(_rng_state_json(state.batch_rng)),
        "history": state.history,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    write_npz(path, arrays)



def load_checkpoint(path, problem: PinnProblem) -> EnsembleState:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        cfg = TrainingConfig.from_dict(meta["config"])

        def load(name):
            keys = sorted((k for k in z.files if k.startswith(name + "_") and k[len(name) + 1:].isdigit()),
                          key=lambda k: int(k[len(name) + 1:]))
            return nn.MlpParams.from_arrays([z[k] for k in keys])

        tensor, maps = load("tensor"), load("maps")
        tprior, mprior = load("tensor_prior"), load("maps_prior")
        n = len(tensor.arrays()) + len(maps.arrays())
        adam = nn.AdamState([z[f"adam_m_{i}"] for i in range(n)], [z[f"adam_v_{i}"] for i in range(n)],
                            step=meta["adam_step"], lr=cfg.learning_rate)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["batch_rng"]
    state = EnsembleState(cfg, tensor, maps, tprior, mprior, adam, rng, iteration=meta["iteration"],
                          history=meta["history"])
    _fill_prior_cache(state, problem)
    return state
