"""Dense numpy tensor ops with hand-written backward rules.

Feature maps are laid out ``[N, C, X, Y, Z]``; a 4D ``[C, X, Y, Z]`` array is
accepted wherever a single sample makes sense and is returned in the same
rank. Kernels are ``[C_out, C_in, k, k, k]``.
"""
from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible for an op."""


class DivergenceError(FloatingPointError):
    """Raised when a gradient or loss stops being finite."""


@dataclass(frozen=True)
class ConvSpec:
    kernel_size: int = 3
    dilation: int = 1
    stride: int = 1
    padding: str = "valid"

    def __post_init__(self):
        if self.kernel_size < 1 or self.dilation < 1:
            raise ValueError(f"bad conv spec {self}")
        if self.stride != 1:
            raise ValueError("only unit stride is supported")
        if self.padding != "valid":
            raise ValueError("only valid (unpadded) convolution is supported")

    @property
    def effective_extent(self) -> int:
        return self.kernel_size + (self.kernel_size - 1) * (self.dilation - 1)

    @property
    def shrink(self) -> int:
        return (self.kernel_size - 1) * self.dilation


def _as5d(x):
    if x.ndim == 4:
        return x[None], True
    if x.ndim != 5:
        raise ShapeError(f"expected a 4D or 5D tensor, got shape {x.shape}")
    return x, False


def _taps(k):
    return itertools.product(range(k), repeat=3)


# Upper bound on the im2col scratch buffer, in elements.
COL_BUDGET = 1 << 24


def _plane_chunks(out_x, col_elems_per_plane):
    rows = max(1, min(out_x, COL_BUDGET // max(col_elems_per_plane, 1)))
    for x0 in range(0, out_x, rows):
        yield x0, min(rows, out_x - x0)


def _conv_geometry(x, w, dilation):
    n, cin, *spatial = x.shape
    if w.ndim != 5:
        raise ShapeError(f"kernel must be 5D, got {w.shape}")
    cout, wcin, k, k2, k3 = w.shape
    if not (k == k2 == k3):
        raise ShapeError(f"kernel must be cubic, got {w.shape}")
    if wcin != cin:
        raise ShapeError(f"input has {cin} channels but kernel expects {wcin}")
    shrink = (k - 1) * dilation
    out_sp = [s - shrink for s in spatial]
    if min(out_sp) < 1:
        raise ShapeError(
            f"spatial extent {tuple(spatial)} smaller than effective kernel "
            f"extent {shrink + 1}"
        )
    return n, cin, cout, k, out_sp


def _gather(xc, col, x0, rows, k, dilation, out_sp):
    # xc is [C_in, N, X, Y, Z]; col is [k^3, C_in, N, rows, Y', Z']
    _, oy, oz = out_sp
    for t, (i, j, l) in enumerate(_taps(k)):
        col[t] = xc[:, :, x0 + i * dilation:x0 + i * dilation + rows,
                    j * dilation:j * dilation + oy, l * dilation:l * dilation + oz]


def conv3d(x, w, dilation=1, bias=None, counter: Counter | None = None):
    """Valid, unit-stride, dilated 3D cross-correlation.

    Only the k^3 real taps are gathered (im2col over slabs of output planes),
    so dilation adds no arithmetic. If ``counter`` is given,
    ``counter["reads"]`` grows by the number of input values consumed, i.e.
    k^3 * N * C_in * output voxels.
    """
    x, squeeze = _as5d(np.asarray(x))
    w = np.asarray(w)
    n, cin, cout, k, out_sp = _conv_geometry(x, w, dilation)
    dtype = np.result_type(x.dtype, w.dtype)
    xc = np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4), dtype=dtype)
    wm = w.transpose(0, 2, 3, 4, 1).reshape(cout, k ** 3 * cin).astype(dtype, copy=False)
    ox, oy, oz = out_sp
    out = np.empty((cout, n, ox, oy, oz), dtype=dtype)
    per_plane = k ** 3 * cin * n * oy * oz
    col = np.empty((k ** 3, cin, n, min(ox, max(1, COL_BUDGET // per_plane)), oy, oz), dtype=dtype)
    for x0, rows in _plane_chunks(ox, per_plane):
        c = col[:, :, :, :rows]
        _gather(xc, c, x0, rows, k, dilation, out_sp)
        out[:, :, x0:x0 + rows] = (wm @ c.reshape(k ** 3 * cin, -1)).reshape(cout, n, rows, oy, oz)
        if counter is not None:
            counter["reads"] += k ** 3 * cin * n * rows * oy * oz
    if counter is not None:
        counter["taps"] += k ** 3
    if bias is not None:
        out += np.asarray(bias, dtype=dtype).reshape(-1, 1, 1, 1, 1)
    out = out.transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(out[0] if squeeze else out)


def conv3d_backward(grad_out, x, w, dilation=1, need_input_grad=True):
    """Gradients of :func:`conv3d` w.r.t. its input and kernel.

    Returns ``(grad_input, grad_kernel)``; ``grad_input`` is None when not
    requested. The bias gradient is ``grad_out`` summed over batch and space
    and is left to the caller.
    """
    x, squeeze = _as5d(np.asarray(x))
    g, _ = _as5d(np.asarray(grad_out))
    w = np.asarray(w)
    n, cin, cout, k, out_sp = _conv_geometry(x, w, dilation)
    if g.shape != (n, cout, *out_sp):
        raise ShapeError(f"grad_out shape {g.shape} != conv output {(n, cout, *out_sp)}")
    dtype = np.result_type(x.dtype, w.dtype)
    xc = np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4), dtype=dtype)
    gc = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4), dtype=dtype)
    wm = w.transpose(0, 2, 3, 4, 1).reshape(cout, k ** 3 * cin).astype(dtype, copy=False)
    ox, oy, oz = out_sp
    gwm = np.zeros((cout, k ** 3 * cin), dtype=np.float64)
    gxc = np.zeros(xc.shape, dtype=dtype) if need_input_grad else None
    per_plane = k ** 3 * cin * n * oy * oz
    col = np.empty((k ** 3, cin, n, min(ox, max(1, COL_BUDGET // per_plane)), oy, oz), dtype=dtype)
    for x0, rows in _plane_chunks(ox, per_plane):
        c = col[:, :, :, :rows]
        _gather(xc, c, x0, rows, k, dilation, out_sp)
        gblk = gc[:, :, x0:x0 + rows].reshape(cout, -1)
        gwm += gblk @ c.reshape(k ** 3 * cin, -1).T
        if need_input_grad:
            gcol = (wm.T @ gblk).reshape(k ** 3, cin, n, rows, oy, oz)
            for t, (i, j, l) in enumerate(_taps(k)):
                gxc[:, :, x0 + i * dilation:x0 + i * dilation + rows,
                    j * dilation:j * dilation + oy, l * dilation:l * dilation + oz] += gcol[t]
    gw = gwm.reshape(cout, k, k, k, cin).transpose(0, 4, 1, 2, 3).astype(dtype)
    gx = None
    if need_input_grad:
        gx = np.ascontiguousarray(gxc.transpose(1, 0, 2, 3, 4))
        if squeeze:
            gx = gx[0]
    return gx, np.ascontiguousarray(gw)


def _channel_view(v, ndim):
    # broadcast a per-channel vector against [N, C, ...] or [C, ...]
    shape = [1] * ndim
    shape[1 if ndim == 5 else 0] = -1
    return np.asarray(v).reshape(shape)


def prelu(x, slopes):
    x = np.asarray(x)
    slopes = np.asarray(slopes)
    nch = x.shape[1] if x.ndim == 5 else x.shape[0]
    if slopes.shape != (nch,):
        raise ShapeError(f"{slopes.shape[0] if slopes.ndim else 'scalar'} slopes for {nch} channels")
    a = _channel_view(slopes, x.ndim).astype(x.dtype, copy=False)
    return np.where(x > 0, x, a * x)


def prelu_backward(grad_out, x, slopes):
    """Returns ``(grad_input, grad_slopes)``."""
    x = np.asarray(x)
    a = _channel_view(slopes, x.ndim).astype(x.dtype, copy=False)
    neg = x <= 0
    gx = np.where(neg, a * grad_out, grad_out)
    axes = tuple(i for i in range(x.ndim) if i != (1 if x.ndim == 5 else 0))
    ga = np.sum(np.where(neg, grad_out * x, 0.0), axis=axes)
    return gx, ga.astype(np.asarray(slopes).dtype, copy=False)


@dataclass
class BatchNormStats:
    """Running statistics of one batch-norm layer."""
    mean: np.ndarray
    var: np.ndarray
    count: int = 0

    @classmethod
    def fresh(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype), 0)


BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def batchnorm(x, gamma, beta, stats: BatchNormStats, training: bool,
              eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel batch normalisation over batch and spatial axes.

    In training mode the batch moments are used and ``stats`` is replaced
    with an exponential moving average (``momentum`` weights the old value).
    Returns ``(y, cache)``; ``cache`` is None outside training.
    """
    x, squeeze = _as5d(np.asarray(x))
    c = x.shape[1]
    if np.shape(gamma) != (c,) or np.shape(beta) != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    axes = (0, 2, 3, 4)
    if training:
        mean = x.mean(axis=axes, dtype=np.float64)
        var = x.var(axis=axes, dtype=np.float64)
        m = x.size // c
        unbiased = var * m / max(m - 1, 1)
        stats.mean = (momentum * stats.mean + (1 - momentum) * mean).astype(stats.mean.dtype)
        stats.var = (momentum * stats.var + (1 - momentum) * unbiased).astype(stats.var.dtype)
        stats.count += 1
    else:
        if stats.count == 0:
            raise RuntimeError("batch-norm running statistics were never updated")
        mean, var = stats.mean.astype(np.float64), stats.var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    shp = (1, c, 1, 1, 1)
    xhat = (x - mean.reshape(shp)) * inv_std.reshape(shp)
    y = (xhat * np.asarray(gamma).reshape(shp) + np.asarray(beta).reshape(shp)).astype(x.dtype, copy=False)
    cache = (xhat.astype(x.dtype, copy=False), inv_std, np.asarray(gamma)) if training else None
    return (y[0] if squeeze else y), cache


def batchnorm_backward(grad_out, cache):
    """Training-mode batch-norm backward. Returns ``(gx, ggamma, gbeta)``."""
    xhat, inv_std, gamma = cache
    g, squeeze = _as5d(np.asarray(grad_out))
    if xhat.ndim == 4:
        xhat = xhat[None]
    axes = (0, 2, 3, 4)
    m = g.size // g.shape[1]
    gbeta = g.sum(axis=axes, dtype=np.float64)
    ggamma = (g * xhat).sum(axis=axes, dtype=np.float64)
    shp = (1, -1, 1, 1, 1)
    scale = (gamma * inv_std).reshape(shp)
    gx = scale / m * (m * g - gbeta.reshape(shp) - xhat * ggamma.reshape(shp))
    gx = gx.astype(g.dtype, copy=False)
    return (gx[0] if squeeze else gx), ggamma.astype(gamma.dtype), gbeta.astype(gamma.dtype)


def dropout(x, p, rng: np.random.Generator):
    """Inverted dropout. Returns ``(output, keep_mask)``.

    Survivors are scaled by ``1 / (1 - p)`` so the expectation is unchanged;
    the same call is used for training and for Monte-Carlo sampling.
    """
    if not 0 <= p < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    x = np.asarray(x)
    if p == 0:
        return x.copy(), np.ones(x.shape, dtype=x.dtype)
    mask = (rng.random(x.shape) >= p).astype(x.dtype)
    return x * mask * x.dtype.type(1.0 / (1.0 - p)), mask


def dropout_backward(grad_out, mask, p):
    return grad_out * mask * np.asarray(grad_out).dtype.type(1.0 / (1.0 - p))


def concat_channels(a, b):
    a, b = np.asarray(a), np.asarray(b)
    ax = 1 if a.ndim == 5 else 0
    if a.ndim != b.ndim or a.shape[:ax] + a.shape[ax + 1:] != b.shape[:ax] + b.shape[ax + 1:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape}: spatial mismatch")
    return np.concatenate([a, b], axis=ax)


def split_channels(g, first):
    """Inverse of :func:`concat_channels`: split after ``first`` channels."""
    ax = 1 if g.ndim == 5 else 0
    return np.split(g, [first], axis=ax)


def softmax_channels(logits):
    logits = np.asarray(logits)
    ax = 1 if logits.ndim == 5 else 0
    if logits.shape[ax] < 2:
        raise ShapeError("softmax needs at least two classes")
    z = logits - logits.max(axis=ax, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=ax, keepdims=True)


def cross_entropy(probs, targets):
    """Mean categorical cross entropy over all voxels.

    ``probs`` are softmax outputs ``[N, C, ...]`` (or ``[C, ...]``) and
    ``targets`` integer labels of the matching non-channel shape. Returns
    ``(loss, grad_logits)`` where the gradient is taken w.r.t. the logits that
    produced ``probs``.
    """
    probs = np.asarray(probs)
    targets = np.asarray(targets)
    squeeze = probs.ndim != 5  # unbatched [C, ...] of any rank
    if squeeze:
        probs, targets = probs[None], targets[None]
    c = probs.shape[1]
    if targets.shape != probs.shape[:1] + probs.shape[2:]:
        raise ShapeError(f"targets {targets.shape} do not match probs {probs.shape}")
    if targets.min() < 0 or targets.max() >= c:
        raise ValueError(f"targets must lie in [0, {c})")
    onehot = np.moveaxis(np.eye(c, dtype=probs.dtype)[targets], -1, 1)
    nvox = targets.size
    p_t = np.sum(probs * onehot, axis=1)
    loss = float(-np.mean(np.log(np.maximum(p_t, np.finfo(probs.dtype).tiny))))
    grad = (probs - onehot) / nvox
    return loss, (grad[0] if squeeze else grad)


def he_init(shape, rng: np.random.Generator, dtype=np.float32):
    """Zero-mean Gaussian with std sqrt(2 / fan_in), fan_in = C_in * k^3."""
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One bias-corrected Adam update. Returns a new parameter dict; ``state``
    is advanced in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, param {params[name].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    new = dict(params)
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = (b1 * m + (1 - b1) * g).astype(p.dtype, copy=False)
        v = (b2 * v + (1 - b2) * (g * g)).astype(p.dtype, copy=False)
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new[name] = (p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype, copy=False)
    return new


def make_streams(seed, names=("init", "sampler", "augment", "dropout")):
    """Independent, reproducible generators keyed by purpose."""
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}
