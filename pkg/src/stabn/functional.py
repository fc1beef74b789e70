"""Differentiable neural-network primitives built on :mod:`stabn.tensor`.

Convolutions are cross-correlations (no kernel flip) computed by unfolding
input patches into a column matrix and issuing batched matmuls.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigurationError, InputError
from .tensor import Tensor, make_result

__all__ = [
    "ConvSpec",
    "conv3d",
    "conv2d",
    "linear",
    "sigmoid",
    "relu",
    "gap3d",
    "gap2d_spatial",
    "softmax_cross_entropy",
    "log_softmax",
    "dropout",
    "batchnorm",
    "BatchNormState",
]


def _triple(v, n: int) -> Tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(x) for x in v)
    if len(v) != n:
        raise ConfigurationError(f"expected {n} values, got {v}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a convolution layer.

    ``kernel``, ``stride`` and ``padding`` have one entry per convolved axis:
    three (frames, height, width) for :func:`conv3d`, two for :func:`conv2d`.
    """

    out_channels: int
    in_channels: int
    kernel: Tuple[int, ...] = (1, 1, 1)
    stride: Union[int, Tuple[int, ...]] = 1
    padding: Union[int, Tuple[int, ...]] = 0
    bias: bool = True

    def __post_init__(self):
        n = len(self.kernel) if not isinstance(self.kernel, int) else 3
        object.__setattr__(self, "kernel", _triple(self.kernel, n))
        object.__setattr__(self, "stride", _triple(self.stride, n))
        object.__setattr__(self, "padding", _triple(self.padding, n))
        problems = []
        if self.out_channels < 1 or self.in_channels < 1:
            problems.append("channel counts must be >= 1")
        if min(self.kernel) < 1 or min(self.stride) < 1:
            problems.append("kernel and stride extents must be >= 1")
        if min(self.padding) < 0:
            problems.append("padding must be >= 0")
        if problems:
            raise ConfigurationError("; ".join(problems))

    @property
    def ndim(self) -> int:
        return len(self.kernel)

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        return (self.out_channels, self.in_channels) + self.kernel

    def output_extents(self, extents: Sequence[int]) -> Tuple[int, ...]:
        out = []
        for axis, (n, k, s, p) in enumerate(zip(extents, self.kernel, self.stride, self.padding)):
            o = (n + 2 * p - k) // s + 1
            if o < 1:
                raise ConfigurationError(
                    f"spatial axis {axis}: extent {n} too small for kernel {k} with padding {p}"
                )
            out.append(o)
        return tuple(out)


def _check_conv(x: Tensor, spec: ConvSpec, w: Tensor, b: Optional[Tensor], ndim: int):
    if spec.ndim != ndim:
        raise ConfigurationError(f"conv{ndim}d needs a {ndim}-axis ConvSpec, got kernel {spec.kernel}")
    if x.ndim != ndim + 2:
        raise ConfigurationError(f"conv{ndim}d input must have {ndim + 2} axes, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ConfigurationError(
            f"input channels: expected {spec.in_channels}, got {x.shape[1]}"
        )
    if w.shape != spec.weight_shape:
        raise ConfigurationError(f"weights: expected shape {spec.weight_shape}, got {w.shape}")
    if spec.bias:
        if b is None or b.shape != (spec.out_channels,):
            raise ConfigurationError(f"bias: expected shape ({spec.out_channels},)")
    elif b is not None:
        raise ConfigurationError("bias given for a bias-free ConvSpec")


def _spatial_patches(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Unfold spatial taps of a padded 5-d array into [N, C*kH*kW, T, Ho*Wo]."""
    n, c, tp = xp.shape[:3]
    sn, sc, s_t, s_h, s_w = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, kh, kw, tp, ho, wo),
        strides=(sn, sc, s_h, s_w, s_t, s_h * sh, s_w * sw),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, tp, ho * wo)


def _temporal_taps(cols: np.ndarray, kt: int, st: int, to: int):
    n, ckk, _, hw = cols.shape
    return [cols[:, :, a : a + st * to : st].reshape(n, ckk, to * hw) for a in range(kt)]


def _correlate(xp: np.ndarray, w: np.ndarray, stride, out_ext):
    """Cross-correlate a padded input with ``w`` [Cout, C, kT, kH, kW].

    Only the spatial taps are unfolded; each temporal tap is a strided view of
    the patch matrix, so the frame axis is never copied kT times. Returns the
    output as [N, Cout, To*Ho*Wo] together with the per-tap patch views.
    """
    cout, c, kt, kh, kw = w.shape
    st, sh, sw = stride
    to, ho, wo = out_ext
    cols = _spatial_patches(xp, kh, kw, sh, sw, ho, wo)
    taps = _temporal_taps(cols, kt, st, to)
    out = None
    for a in range(kt):
        wa = np.ascontiguousarray(w[:, :, a].reshape(cout, c * kh * kw))
        if out is None:
            out = np.matmul(wa, taps[a])
        else:
            out += np.matmul(wa, taps[a])
    return out, taps


def _conv_core(x: Tensor, spec3: ConvSpec, w: Tensor, b: Optional[Tensor]) -> Tensor:
    """Convolution over the last three axes of a 5-d tensor."""
    n, c, t, h, wd = x.shape
    kernel, stride, pad = spec3.kernel, spec3.stride, spec3.padding
    kt, kh, kw = kernel
    pt, ph, pw = pad
    to, ho, wo = out_ext = spec3.output_extents((t, h, wd))
    cout = spec3.out_channels

    xp = x.data
    if any(pad):
        xp = np.pad(xp, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    out, taps = _correlate(xp, w.data, stride, out_ext)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, cout, to, ho, wo)
    # stride-1 input gradients run as a correlation of the padded output
    # gradient with the flipped kernel; otherwise patches are scattered back
    transposed = stride == (1, 1, 1) and all(p <= k - 1 for p, k in zip(pad, kernel))

    def backward(g):
        gm = g.reshape(n, cout, to * ho * wo)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.empty(w.shape)
            for a in range(kt):
                xa = taps[a]
                acc = gm[0] @ xa[0].T
                for i in range(1, n):
                    acc += gm[i] @ xa[i].T
                gw[:, :, a] = acc.reshape(cout, c, kh, kw)
        if b is not None and b.requires_grad:
            gb = gm.sum(axis=(0, 2))
        if x.requires_grad:
            if transposed:
                gx = _input_grad_transposed(g, w.data, pad, (t, h, wd))
            else:
                gx = _input_grad_scatter(gm, w.data, x.shape, stride, pad, out_ext)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward, "conv")


def _input_grad_transposed(g: np.ndarray, w: np.ndarray, pad, in_ext) -> np.ndarray:
    kernel = w.shape[2:]
    if kernel == (1, 1, 1):
        cout, c = w.shape[:2]
        n = g.shape[0]
        return np.matmul(w.reshape(cout, c).T, g.reshape(n, cout, -1)).reshape((n, c) + tuple(in_ext))
    widths = [(k - 1 - p, k - 1 - p) for k, p in zip(kernel, pad)]
    gp = np.pad(g, [(0, 0), (0, 0)] + widths)
    flipped = w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
    gx, _ = _correlate(gp, flipped, (1, 1, 1), in_ext)
    return gx.reshape((g.shape[0], w.shape[1]) + tuple(in_ext))


def _input_grad_scatter(gm, w, in_shape, stride, pad, out_ext) -> np.ndarray:
    n, c, t, h, wd = in_shape
    cout, _, kt, kh, kw = w.shape
    st, sh, sw = stride
    pt, ph, pw = pad
    to, ho, wo = out_ext
    ckk = c * kh * kw
    tp = t + 2 * pt
    gcols = np.zeros((n, ckk, tp, ho * wo))
    for a in range(kt):
        wa = w[:, :, a].reshape(cout, ckk)
        gcols[:, :, a : a + st * to : st] += np.matmul(wa.T, gm).reshape(n, ckk, to, ho * wo)
    if kh == kw == sh == sw == 1 and not ph and not pw:
        gxp = gcols.reshape(n, c, tp, h, wd)
    else:
        gxp = np.zeros((n, c, tp, h + 2 * ph, wd + 2 * pw))
        gk = gcols.reshape(n, c, kh, kw, tp, ho, wo)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += gk[:, :, i, j]
    return gxp[:, :, pt : pt + t, ph : ph + h, pw : pw + wd]


def conv3d(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """3-d cross-correlation of ``x`` [N, C, T, H, W] with zero padding."""
    _check_conv(x, spec, weights, bias, 3)
    return _conv_core(x, spec, weights, bias)


def conv2d(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """2-d cross-correlation of ``x`` [N, C, H, W]; runs as a 3-d conv with a unit frame axis."""
    from .tensor import reshape

    _check_conv(x, spec, weights, bias, 2)
    n, c, h, w = x.shape
    spec3 = ConvSpec(
        spec.out_channels,
        spec.in_channels,
        (1,) + spec.kernel,
        (1,) + spec.stride,
        (0,) + spec.padding,
        spec.bias,
    )
    w3 = reshape(weights, spec3.weight_shape)
    out = _conv_core(reshape(x, (n, c, 1, h, w)), spec3, w3, bias)
    return reshape(out, (n, spec.out_channels) + out.shape[3:])


def linear(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weights.T + bias`` for ``x`` [N, D] and ``weights`` [Dout, D]."""
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise ConfigurationError(
            f"linear: input {x.shape} incompatible with weights {weights.shape}"
        )
    if bias is not None and bias.shape != (weights.shape[0],):
        raise ConfigurationError(f"linear: bias {bias.shape} does not match {weights.shape[0]} outputs")
    out = x.data @ weights.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weights.data if x.requires_grad else None
        gw = g.T @ x.data if weights.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weights) if bias is None else (x, weights, bias)
    return make_result(out, parents, backward, "linear")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _mean_over(x: Tensor, axes: Tuple[int, ...], op: str) -> Tensor:
    count = int(np.prod([x.shape[a] for a in axes]))
    keep = list(x.shape)
    for a in axes:
        keep[a] = 1

    def backward(g):
        return (np.broadcast_to(g.reshape(keep) / count, x.shape),)

    return make_result(x.data.mean(axis=axes), (x,), backward, op)


def gap3d(x: Tensor) -> Tensor:
    """Global average over frames, height and width: [N, C, T, H, W] -> [N, C]."""
    if x.ndim != 5:
        raise ConfigurationError(f"gap3d expects [N,C,T,H,W], got {x.shape}")
    return _mean_over(x, (2, 3, 4), "gap3d")


def gap2d_spatial(x: Tensor) -> Tensor:
    """Spatial mean that keeps the frame axis: [N, T, H, W] -> [N, T]."""
    if x.ndim != 4:
        raise ConfigurationError(f"gap2d_spatial expects [N,T,H,W], got {x.shape}")
    return _mean_over(x, (2, 3), "gap2d_spatial")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InputError(f"logits {logits.shape} and labels {labels.shape} disagree")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    n = logits.shape[0]
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return make_result(np.asarray(loss), (logits,), backward, "softmax_xent")


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate); identity when not training."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


@dataclass
class BatchNormState:
    """Running statistics of one normalization layer (not trained by gradients)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))


def batchnorm(
    x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool
) -> Tensor:
    """Per-channel normalization over every axis except 1.

    In training mode the batch statistics are used and folded into
    ``state`` as ``running = momentum * running + (1 - momentum) * batch``
    (unbiased variance for the running estimate).
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigurationError(f"batchnorm: {c} channels but scale {gamma.shape}, shift {beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.data.size // c
        state.running_mean = state.momentum * state.running_mean + (1 - state.momentum) * mean
        unbiased = var * m / max(m - 1, 1)
        state.running_var = state.momentum * state.running_var + (1 - state.momentum) * unbiased
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                mean_g = gxhat.mean(axis=axes, keepdims=True)
                mean_gx = (gxhat * xhat).mean(axis=axes, keepdims=True)
                gx = (gxhat - mean_g - xhat * mean_gx) * inv_std.reshape(bshape)
            else:
                gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "batchnorm")
