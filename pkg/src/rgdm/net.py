"""Concatsquash MLP noise estimator with exact reverse-mode gradients.

Each point of a cloud goes through the same stack of layers

    y = (W x + b) * sigmoid(w_gate c + b_gate) + w_bias c

where ``c`` is the per-cloud context vector.  With ``context="time"`` it is
the scalar ``t / T`` and every point is mapped independently.  With
``context="time+centroid"`` the centroid of the noisy input cloud is appended,
which lets the network keep a cloud in one mode; the map stays equivariant
to point permutations.  Hidden layers are followed by a leaky ReLU, the
output layer is linear.

Parameters live in one flat float64 vector.  Per layer, in order:
``W`` (out x in, row-major), ``b`` (out), ``w_gate`` (out x ctx, row-major),
``b_gate`` (out), ``w_bias`` (out x ctx).  For the time-only context
``ctx = 1`` and the gate/bias slopes are plain ``out`` vectors.  Checkpoints
store the vector in exactly this order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NEGATIVE_SLOPE = 0.01
CONTEXTS = ("time", "time+centroid")


class TopologyError(ValueError):
    pass


class ShapeError(ValueError):
    pass


def context_dim(context: str, dim: int) -> int:
    if context not in CONTEXTS:
        raise TopologyError(f"unknown context {context!r}; expected one of {CONTEXTS}")
    return 1 if context == "time" else 1 + dim


def param_count(layer_dims, context: str = "time") -> int:
    cd = context_dim(context, layer_dims[0])
    return sum(o * i + 2 * o + 2 * o * cd for i, o in zip(layer_dims[:-1], layer_dims[1:]))


def _check_dims(layer_dims) -> list[int]:
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise TopologyError(f"need at least two positive widths, got {list(layer_dims)}")
    if dims[0] != dims[-1]:
        raise TopologyError(f"input width {dims[0]} must equal output width {dims[-1]}")
    return dims


@dataclass
class NoiseEstimator:
    layer_dims: list[int]
    params: np.ndarray
    context: str = "time"
    negative_slope: float = NEGATIVE_SLOPE

    def __post_init__(self):
        self.layer_dims = _check_dims(self.layer_dims)
        context_dim(self.context, self.layer_dims[0])
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (self.param_count,):
            raise TopologyError(
                f"parameter vector has length {self.params.size}, topology needs {self.param_count}"
            )

    @property
    def param_count(self) -> int:
        return param_count(self.layer_dims, self.context)

    @property
    def ctx_dim(self) -> int:
        return context_dim(self.context, self.dim)

    @property
    def dim(self) -> int:
        return self.layer_dims[0]

    def layers(self, flat: np.ndarray | None = None):
        """Split a flat vector (params by default) into per-layer views."""
        flat = self.params if flat is None else flat
        cd = self.ctx_dim
        out, pos = [], 0

        def take(n, shape):
            nonlocal pos
            pos += n
            return flat[pos - n : pos].reshape(shape)

        for i, o in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            slope_shape = (o,) if cd == 1 else (o, cd)
            W, b = take(o * i, (o, i)), take(o, (o,))
            w_gate, b_gate, w_bias = take(o * cd, slope_shape), take(o, (o,)), take(o * cd, slope_shape)
            out.append((W, b, w_gate, b_gate, w_bias))
        return out

    def copy(self) -> "NoiseEstimator":
        return NoiseEstimator(list(self.layer_dims), self.params.copy(), self.context, self.negative_slope)


def init_estimator(layer_dims, seed: int, context: str = "time") -> NoiseEstimator:
    """Uniform fan-in initialization for weights and gate/bias slopes; offsets start at zero."""
    dims = _check_dims(layer_dims)
    rng = np.random.Generator(np.random.Philox(seed))
    est = NoiseEstimator(dims, np.zeros(param_count(dims, context)), context)
    for W, _, w_gate, _, w_bias in est.layers():
        bound = 1.0 / np.sqrt(W.shape[1])
        W[...] = rng.uniform(-bound, bound, size=W.shape)
        w_gate[...] = rng.uniform(-1.0, 1.0, size=w_gate.shape)
        w_bias[...] = rng.uniform(-bound, bound, size=w_bias.shape)
    return est


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def concatsquash_forward(x, t_ctx, layer_params):
    """One concatsquash layer for a single input vector (or a stack of them)."""
    W, b, w_gate, b_gate, w_bias = layer_params
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} does not match layer width {W.shape[1]}")
    c = np.atleast_1d(np.asarray(t_ctx, dtype=np.float64))
    w_gate, w_bias = np.reshape(w_gate, (len(b), -1)), np.reshape(w_bias, (len(b), -1))
    if w_gate.shape[1] != c.size:
        raise ShapeError(f"context of size {c.size} does not match gate width {w_gate.shape[1]}")
    gate = _sigmoid(w_gate @ c + b_gate)
    return (x @ W.T + b) * gate + w_bias @ c


def _as_batch(est: NoiseEstimator, X, t, T):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 2
    Xb = X[None] if single else X
    if Xb.ndim != 3 or Xb.shape[-1] != est.dim:
        raise ShapeError(f"expected (N, {est.dim}) or (B, N, {est.dim}) points, got {X.shape}")
    t = np.broadcast_to(np.asarray(t), (Xb.shape[0],))
    if np.any(t < 1) or np.any(t > T):
        raise ShapeError(f"time steps must lie in [1, {T}]")
    ctx = (t.astype(np.float64) / float(T))[:, None]
    if est.context == "time+centroid":
        ctx = np.concatenate([ctx, Xb.mean(axis=1)], axis=1)
    return Xb, ctx, single


def _forward(est: NoiseEstimator, Xb: np.ndarray, ctx: np.ndarray):
    B, N, _ = Xb.shape
    h = Xb.reshape(B * N, -1)
    cache = []
    layers = est.layers()
    for k, (W, b, w_gate, b_gate, w_bias) in enumerate(layers):
        lin = h @ W.T
        lin += b
        gate = _sigmoid(ctx @ w_gate.reshape(len(b), -1).T + b_gate)  # (B, out)
        lin3 = lin.reshape(B, N, -1)
        pre = lin3 * gate[:, None, :]
        pre += (ctx @ w_bias.reshape(len(b), -1).T)[:, None, :]
        pre = pre.reshape(B * N, -1)
        if k < len(layers) - 1:
            cache.append((h, lin3, gate, pre))
            h = np.maximum(pre, est.negative_slope * pre)
        else:
            cache.append((h, lin3, gate))
            h = pre
    return h.reshape(B, N, -1), cache


def predict_noise(est: NoiseEstimator, X_t, t, T: int) -> np.ndarray:
    """Noise prediction for one cloud ``(N, dim)`` or a batch ``(B, N, dim)``.

    ``t`` is an integer step or one step per batch member.
    """
    Xb, ctx, single = _as_batch(est, X_t, t, T)
    out, _ = _forward(est, Xb, ctx)
    return out[0] if single else out


def _backward(est: NoiseEstimator, ctx, cache, upstream: np.ndarray) -> np.ndarray:
    B, N, _ = upstream.shape
    grad = np.zeros_like(est.params)
    glayers = est.layers(grad)
    layers = est.layers()
    d_pre = upstream.reshape(B * N, -1)
    for k in range(len(layers) - 1, -1, -1):
        W = layers[k][0]
        gW, gb, gw_gate, gb_gate, gw_bias = glayers[k]
        h_in, lin3, gate = cache[k][:3]
        if k < len(layers) - 1:
            pre = cache[k][3]
            d_pre = np.where(pre > 0, d_pre, est.negative_slope * d_pre)
        d3 = d_pre.reshape(B, N, -1)
        # the context depends on the input cloud only, never on the parameters
        gw_bias[...] = (d3.sum(axis=1).T @ ctx).reshape(gw_bias.shape)
        d_gate_pre = np.einsum("bno,bno->bo", d3, lin3) * gate * (1.0 - gate)
        gw_gate[...] = (d_gate_pre.T @ ctx).reshape(gw_gate.shape)
        gb_gate[...] = d_gate_pre.sum(axis=0)
        d_lin = (d3 * gate[:, None, :]).reshape(B * N, -1)
        gW[...] = d_lin.T @ h_in
        gb[...] = d_lin.sum(axis=0)
        if k > 0:
            d_pre = d_lin @ W
    return grad


def forward_backward(est: NoiseEstimator, X_t, t, T: int, upstream_fn):
    """Run the network once and backprop ``upstream_fn(prediction)``.

    Returns ``(prediction, upstream, grad)``; used by the losses so that the
    forward pass is not repeated.
    """
    Xb, ctx, single = _as_batch(est, X_t, t, T)
    out, cache = _forward(est, Xb, ctx)
    pred = out[0] if single else out
    up = np.asarray(upstream_fn(pred), dtype=np.float64)
    if up.shape != pred.shape:
        raise ShapeError(f"upstream shape {up.shape} does not match output {pred.shape}")
    grad = _backward(est, ctx, cache, up[None] if single else up)
    return pred, up, grad


def backprop(est: NoiseEstimator, X_t, t, T: int, upstream) -> np.ndarray:
    """Gradient of ``<upstream, predict_noise(est, X_t, t, T)>`` w.r.t. the flat params."""
    upstream = np.asarray(upstream, dtype=np.float64)
    return forward_backward(est, X_t, t, T, lambda pred: upstream)[2]
