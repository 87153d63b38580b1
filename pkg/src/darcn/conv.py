"""2-D convolution, its adjoint (transposed convolution) and batch norm.

Convolutions use the correlation convention (no kernel flip), NCHW
layout, and per-side padding ``(top, bottom, left, right)`` so causal
time padding and odd frequency targets can be expressed directly. For
spectrogram tensors the two spatial axes are (time, frequency).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ContractError, DimensionError
from .tensor import Tensor, make

Pair = tuple[int, int]
Pad4 = tuple[int, int, int, int]


def _pair(v) -> Pair:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def _pad4(p) -> Pad4:
    if isinstance(p, int):
        return (p, p, p, p)
    p = tuple(int(v) for v in p)
    if len(p) == 2:
        return (p[0], p[0], p[1], p[1])
    if len(p) != 4:
        raise ContractError(f"padding must have 1, 2 or 4 entries, got {p}")
    if min(p) < 0:
        raise ContractError(f"negative padding {p}")
    return p


def conv_output_size(n: int, k: int, s: int, lo: int, hi: int, d: int = 1) -> int:
    span = d * (k - 1) + 1
    total = n + lo + hi
    if total < span:
        return 0
    return (total - span) // s + 1


def _windows(xp: np.ndarray, k: Pair, s: Pair, d: Pair, out: Pair) -> np.ndarray:
    """Strided view (B, C, kT, kF, T', F') over a padded input."""
    b, c = xp.shape[:2]
    sb, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(b, c, k[0], k[1], out[0], out[1]),
        strides=(sb, sc, sh * d[0], sw * d[1], sh * s[0], sw * s[1]),
        writeable=False,
    )


def _pad(x: np.ndarray, p: Pad4) -> np.ndarray:
    if not any(p):
        return x
    return np.pad(x, ((0, 0), (0, 0), (p[0], p[1]), (p[2], p[3])))


def _scatter_windows(gcols: np.ndarray, padded_shape, k: Pair, s: Pair, d: Pair, out: Pair) -> np.ndarray:
    """Adjoint of :func:`_windows`: sum window gradients back into the padded input.

    ``gcols`` has layout (B, T', F', C, kT, kF).
    """
    gxp = np.zeros(padded_shape, dtype=gcols.dtype)
    gcols = np.ascontiguousarray(gcols.transpose(4, 5, 0, 3, 1, 2))  # (kT,kF,B,C,T',F')
    for i in range(k[0]):
        t0 = i * d[0]
        ts = slice(t0, t0 + s[0] * (out[0] - 1) + 1, s[0])
        for j in range(k[1]):
            f0 = j * d[1]
            fs = slice(f0, f0 + s[1] * (out[1] - 1) + 1, s[1])
            gxp[:, :, ts, fs] += gcols[i, j]
    return gxp


def _crop(xp: np.ndarray, p: Pad4, shape) -> np.ndarray:
    return xp[:, :, p[0]:p[0] + shape[0], p[2]:p[2] + shape[1]]


def _check_inputs(x: Tensor, w: Tensor, cin_axis: int, name: str):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"{name} expects 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[cin_axis]:
        raise DimensionError(f"{name}: input channels {x.shape[1]} do not match weight {w.shape}")


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, pad=0, dilation=1) -> Tensor:
    """Cross-correlate ``x`` [B,Cin,T,F] with ``w`` [Cout,Cin,kT,kF]."""
    _check_inputs(x, w, 1, "conv2d")
    s, d, p = _pair(stride), _pair(dilation), _pad4(pad)
    if min(s) < 1 or min(d) < 1:
        raise ContractError(f"stride {s} and dilation {d} must be >= 1")
    k = w.shape[2:]
    if k == (1, 1) and s == (1, 1) and not any(p):
        return _pointwise(x, w, bias)
    out = (conv_output_size(x.shape[2], k[0], s[0], p[0], p[1], d[0]),
           conv_output_size(x.shape[3], k[1], s[1], p[2], p[3], d[1]))
    if min(out) < 1:
        raise DimensionError(f"kernel {k} (dilation {d}) larger than padded input {x.shape} with pad {p}")
    xp = _pad(x.data, p)
    cols = _windows(xp, k, s, d, out)
    y = np.tensordot(cols, w.data, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        y = y + bias.data.reshape(1, -1, 1, 1)
    y = np.ascontiguousarray(y)

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.tensordot(g, w.data, axes=([1], [0]))  # (B,T',F',Cin,kT,kF)
            gx = _crop(_scatter_windows(gcols, xp.shape, k, s, d, out), p, x.shape[2:])
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return make(y, parents, bw, "conv2d")


def _pointwise(x: Tensor, w: Tensor, bias: Tensor | None) -> Tensor:
    b, c, t, f = x.shape
    w2 = w.data[:, :, 0, 0]
    xf = x.data.reshape(b, c, t * f)
    y = np.matmul(w2, xf)
    if bias is not None:
        y += bias.data.reshape(1, -1, 1)
    y = y.reshape(b, -1, t, f)

    def bw(g):
        gf = g.reshape(b, -1, t * f)
        gx = np.matmul(w2.T, gf).reshape(x.shape) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = np.einsum("bot,bct->oc", gf, xf).reshape(w.shape)
        gb = gf.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return make(y, parents, bw, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, pad=0,
                     output_shape: Pair | None = None, dilation=1) -> Tensor:
    """Transposed convolution: the input-adjoint of :func:`conv2d`, plus bias.

    ``w`` is laid out [Cin, Cout, kT, kF], i.e. the weight of the conv2d
    mapping the output space back to ``x``. The result has the shape
    ``output_shape`` (default: the smallest size the adjoint reaches); it
    must be a size that the matching conv2d maps onto ``x.shape``.
    """
    _check_inputs(x, w, 0, "conv_transpose2d")
    s, d, p = _pair(stride), _pair(dilation), _pad4(pad)
    if min(s) < 1 or min(d) < 1:
        raise ContractError(f"stride {s} and dilation {d} must be >= 1")
    k = w.shape[2:]
    n_in = x.shape[2:]
    if output_shape is None:
        output_shape = tuple((n - 1) * st + dl * (kk - 1) + 1 - lo - hi
                             for n, st, dl, kk, lo, hi in zip(n_in, s, d, k, p[0::2], p[1::2]))
    output_shape = _pair(output_shape)
    back = (conv_output_size(output_shape[0], k[0], s[0], p[0], p[1], d[0]),
            conv_output_size(output_shape[1], k[1], s[1], p[2], p[3], d[1]))
    if min(output_shape) < 1 or back != tuple(n_in):
        raise DimensionError(
            f"conv_transpose2d: output {output_shape} is incompatible with input {x.shape}, "
            f"kernel {k}, stride {s}, pad {p}")
    padded = (x.shape[0], w.shape[1], output_shape[0] + p[0] + p[1], output_shape[1] + p[2] + p[3])
    gcols = np.tensordot(x.data, w.data, axes=([1], [0]))  # (B,T,F,Cout,kT,kF)
    y = _crop(_scatter_windows(gcols, padded, k, s, d, n_in), p, output_shape)
    if bias is not None:
        y = y + bias.data.reshape(1, -1, 1, 1)
    y = np.ascontiguousarray(y)

    def bw(g):
        gx = gw = gb = None
        gp = _pad(g, p)
        cols = _windows(gp, k, s, d, n_in)  # (B,Cout,kT,kF,T,F)
        if x.requires_grad:
            gx = np.ascontiguousarray(
                np.tensordot(cols, w.data, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2))
        if w.requires_grad:
            gw = np.tensordot(x.data, cols, axes=([0, 2, 3], [0, 4, 5]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return make(y, parents, bw, "conv_transpose2d")


@dataclass
class RunningStats:
    """Per-channel running mean/variance used by batch norm in eval mode."""

    mean: np.ndarray
    var: np.ndarray
    updates: int = 0

    @classmethod
    def zeros(cls, channels: int, dtype=np.float64) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats, training: bool,
               momentum: float = 0.9, eps: float = 1e-5, mask: np.ndarray | None = None) -> Tensor:
    """Per-channel normalization of [B,C,T,F] over (B,T,F).

    In training mode the batch statistics are used and ``stats`` moves
    toward them (``new = momentum*old + (1-momentum)*batch``, biased
    variance). ``mask`` (broadcastable to ``x``, 1 = valid) restricts the
    statistics to valid frames so zero padding does not leak into them.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects [B,C,T,F], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    if training:
        if mask is None:
            n = x.size // c
            mu = x.data.mean(axis=axes)
            xc = x.data - mu.reshape(bshape)
            var = (xc * xc).mean(axis=axes)
        else:
            m = np.broadcast_to(mask.astype(x.dtype), (x.shape[0], 1) + x.shape[2:])
            n = float(m.sum())
            if n == 0:
                raise ContractError("batch_norm mask selects no entries")
            mu = (x.data * m).sum(axis=axes) / n
            xc = x.data - mu.reshape(bshape)
            var = (xc * xc * m).sum(axis=axes) / n
        stats.mean = (momentum * stats.mean + (1.0 - momentum) * mu).astype(stats.mean.dtype)
        stats.var = (momentum * stats.var + (1.0 - momentum) * var).astype(stats.var.dtype)
        stats.updates += 1
    else:
        if stats.updates == 0:
            raise ContractError("batch_norm in eval mode before any running statistics were recorded")
        mu = stats.mean.astype(x.dtype)
        var = stats.var.astype(x.dtype)
        xc = x.data - mu.reshape(bshape)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv.reshape(bshape)
    y = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def bw(g):
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = gxhat.sum(axis=axes).reshape(bshape)
                s2 = (gxhat * xhat).sum(axis=axes).reshape(bshape)
                mm = 1.0 if mask is None else m
                gx = inv.reshape(bshape) * (gxhat - mm * (s1 + xhat * s2) / n)
            else:
                gx = gxhat * inv.reshape(bshape)
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        return gx, gg, gb

    return make(np.ascontiguousarray(y.astype(x.dtype)), (x, gamma, beta), bw, "batch_norm")
