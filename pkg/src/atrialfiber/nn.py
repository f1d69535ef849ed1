"""Small multilayer perceptrons with hand-written adjoints.

Weights are stored input-major (``x @ W + b``) and may carry leading batch
axes, so a whole ensemble of equally shaped networks is evaluated with one
broadcasted ``matmul`` per layer. Two code paths exist:

* value path: :func:`forward` / :func:`backward`,
* value-and-input-Jacobian path: :func:`forward_jacobian` /
  :func:`backward_jacobian`, which pushes input tangents forward and then
  reverses through both the primal and the tangent streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "MlpParams",
    "RandomizedPriorPair",
    "AdamState",
    "glorot_init",
    "stack_params",
    "forward",
    "forward_cached",
    "backward",
    "forward_jacobian",
    "backward_jacobian",
    "input_jacobian",
    "adam_step",
    "NumericalError",
]

ACTIVATIONS = ("tanh", "linear")


class NumericalError(FloatingPointError):
    pass


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases differ in length")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[-1] != b.shape[-2]:
                raise ValueError(f"shape chain broken: {a.shape} -> {b.shape}")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[-2]] + [w.shape[-1] for w in self.weights]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.weights[0].shape[:-2]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays, activation="tanh") -> "MlpParams":
        return cls(list(arrays[0::2]), list(arrays[1::2]), activation)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def member(self, index) -> "MlpParams":
        """Slice one network out of the leading batch axes."""
        return MlpParams([w[index] for w in self.weights], [b[index] for b in self.biases], self.activation)

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases],
                         self.activation)


@dataclass
class RandomizedPriorPair:
    """Trainable network plus a frozen, identically shaped prior network."""

    trainable: MlpParams
    prior: MlpParams
    prior_scale: float


def glorot_init(dims, seed, activation: str = "tanh") -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return MlpParams(ws, bs, activation)


def stack_params(params: list[MlpParams]) -> MlpParams:
    first = params[0]
    return MlpParams(
        [np.stack([p.weights[i] for p in params]) for i in range(len(first.weights))],
        [np.stack([p.biases[i] for p in params]) for i in range(len(first.biases))],
        first.activation,
    )


def _act(z, activation):
    """Activation and its derivative; overwrites ``z``."""
    if activation == "tanh":
        h = np.tanh(z, out=z)
        d = h * h
        np.subtract(1.0, d, out=d)
        return h, d
    return z, None


def _sum_points(g):
    # sum over the point axis (-2) through BLAS, much faster than a strided reduction
    return np.ones(g.shape[-2]) @ g


def _outer_sum(a, b):
    """``sum_p a[..., p, :]^T b[..., p, :]`` for the leading point axes of Jacobian streams."""
    a2 = a.reshape(a.shape[:-3] + (-1, a.shape[-1]))
    b2 = b.reshape(b.shape[:-3] + (-1, b.shape[-1]))
    return np.swapaxes(a2, -1, -2) @ b2


# ----------------------------------------------------------------------------
# value path
# ----------------------------------------------------------------------------
def forward_cached(params: MlpParams, x: np.ndarray):
    """Evaluate on inputs ``(..., P, n_in)``; returns ``(out, cache)``."""
    hs = [x]
    ds = []
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        z = h @ w
        z += b[..., None, :]
        h, d = _act(z, params.activation)
        hs.append(h)
        ds.append(d)
    out = h @ params.weights[-1] + params.biases[-1][..., None, :]
    return out, (hs, ds)


def forward(params: MlpParams, x) -> np.ndarray:
    """Network output; a single input vector gives a single output vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return forward_cached(params, x[None, :])[0][..., 0, :]
    return forward_cached(params, x)[0]


def _reduce_to(g, shape):
    """Sum a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(extra))) if extra else g
    axes = tuple(i for i, (s, t) in enumerate(zip(shape, g.shape)) if s == 1 and t != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def backward(params: MlpParams, cache, g_out: np.ndarray, want_input: bool = False):
    """Reverse pass. Returns an :class:`MlpParams` of gradients (and dL/dx)."""
    hs, ds = cache
    L = len(params.weights)
    gw = [None] * L
    gb = [None] * L
    gw[-1] = _reduce_to(np.swapaxes(hs[-1], -1, -2) @ g_out, params.weights[-1].shape)
    gb[-1] = _reduce_to(_sum_points(g_out), params.biases[-1].shape)
    gh = g_out @ np.swapaxes(params.weights[-1], -1, -2)
    for l in range(L - 2, -1, -1):
        gz = gh
        if ds[l] is not None:
            gz *= ds[l]  # gh is a fresh product, safe to overwrite
        gw[l] = _reduce_to(np.swapaxes(hs[l], -1, -2) @ gz, params.weights[l].shape)
        gb[l] = _reduce_to(_sum_points(gz), params.biases[l].shape)
        if l > 0 or want_input:
            gh = gz @ np.swapaxes(params.weights[l], -1, -2)
    grads = MlpParams(gw, gb, params.activation)
    return (grads, gh) if want_input else grads


# ----------------------------------------------------------------------------
# value + input-Jacobian path
# ----------------------------------------------------------------------------
def forward_jacobian(params: MlpParams, x: np.ndarray):
    """Outputs ``(..., P, n_out)`` and Jacobians ``(..., P, n_in, n_out)``.

    ``J[..., p, i, o] = d out_o / d x_i``.
    """
    n_in = params.weights[0].shape[-2]
    hs, ds, zdots, hdots = [x], [], [], []
    h = x
    hdot = None  # tangent of h, shape (..., P, n_in, width); identity at the input
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        z = h @ w + b[..., None, :]
        zdot = (w[..., None, :, :] if hdot is None else hdot @ w[..., None, :, :])
        if hdot is None:
            zdot = np.broadcast_to(zdot, z.shape[:-1] + (n_in, w.shape[-1]))
        h, d = _act(z, params.activation)
        hdot = zdot * d[..., None, :] if d is not None else zdot
        hs.append(h)
        ds.append(d)
        zdots.append(zdot)
        hdots.append(hdot)
    wo = params.weights[-1]
    out = h @ wo + params.biases[-1][..., None, :]
    if hdot is None:
        J = np.broadcast_to(wo[..., None, :, :], out.shape[:-1] + wo.shape[-2:])
    else:
        J = hdot @ wo[..., None, :, :]
    return out, J, (hs, ds, zdots, hdots)


def backward_jacobian(params: MlpParams, cache, g_out, g_J) -> MlpParams:
    """Parameter gradients given cotangents for outputs and Jacobians."""
    hs, ds, zdots, hdots = cache
    L = len(params.weights)
    gw = [None] * L
    gb = [None] * L
    wo = params.weights[-1]
    woT = np.swapaxes(wo, -1, -2)
    if g_out is None:
        g_out = np.zeros(g_J.shape[:-2] + (wo.shape[-1],))
    g_w_out = np.swapaxes(hs[-1], -1, -2) @ g_out
    if L > 1:
        g_w_out = g_w_out + _outer_sum(hdots[-1], g_J)
    else:
        g_w_out = g_w_out + g_J.sum(axis=-3)
    gw[-1] = _reduce_to(g_w_out, wo.shape)
    gb[-1] = _reduce_to(_sum_points(g_out), params.biases[-1].shape)
    gh = g_out @ woT
    ghdot = g_J @ woT[..., None, :, :]
    for l in range(L - 2, -1, -1):
        d = ds[l]
        if d is not None:
            h = hs[l + 1]
            gzdot = ghdot * d[..., None, :]
            gd = np.sum(ghdot * zdots[l], axis=-2)
            gz = gh * d + gd * (-2.0 * h * d)
        else:
            gzdot = ghdot
            gz = gh
        w = params.weights[l]
        g_w = np.swapaxes(hs[l], -1, -2) @ gz
        if l > 0:
            g_w = g_w + _outer_sum(hdots[l - 1], gzdot)
        else:
            g_w = g_w + gzdot.sum(axis=-3)  # input tangent is the identity
        gw[l] = _reduce_to(g_w, w.shape)
        gb[l] = _reduce_to(_sum_points(gz), params.biases[l].shape)
        if l > 0:
            wT = np.swapaxes(w, -1, -2)
            gh = gz @ wT
            ghdot = gzdot @ wT[..., None, :, :]
    return MlpParams(gw, gb, params.activation)


def input_jacobian(params: MlpParams, x) -> np.ndarray:
    """``n_out x n_in`` Jacobian of a single network at one input vector."""
    x = np.asarray(x, dtype=float)
    _, J, _ = forward_jacobian(params, x[None, :])
    return np.swapaxes(J[0], -1, -2)


# ----------------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------------
@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays, **kw) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kw)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray], *, iteration=None) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            where = state.step if iteration is None else iteration
            raise NumericalError(f"non-finite gradient at iteration {where}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
