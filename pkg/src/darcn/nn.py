"""Parameter containers and the composite layers of the network.

Layers hold their parameters as tracked leaf tensors and expose a plain
``__call__``; a ``Module`` walks its attributes to enumerate parameters
and batch-norm statistics by dotted name.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .conv import RunningStats, batch_norm, conv2d, conv_transpose2d
from .errors import ConfigError, DimensionError
from .tensor import Tensor


class Module:
    training: bool = True
    dtype = np.float64

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_stats(self, prefix: str = "") -> Iterator[tuple[str, RunningStats]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, RunningStats):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_stats(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_stats(f"{full}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel=(1, 1), stride=(1, 1), pad=(0, 0, 0, 0),
                 dilation=(1, 1), bias: bool = True, *, rng: np.random.Generator, dtype=np.float64):
        fan_in = cin * kernel[0] * kernel[1]
        self.weight = _uniform(rng, (cout, cin) + tuple(kernel), fan_in, dtype)
        self.bias = _uniform(rng, (cout,), fan_in, dtype) if bias else None
        self.stride, self.pad, self.dilation = tuple(stride), tuple(pad), tuple(dilation)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.pad, self.dilation)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, kernel=(1, 1), stride=(1, 1), pad=(0, 0, 0, 0),
                 bias: bool = True, *, rng: np.random.Generator, dtype=np.float64):
        fan_in = cout * kernel[0] * kernel[1]
        self.weight = _uniform(rng, (cin, cout) + tuple(kernel), fan_in, dtype)
        self.bias = _uniform(rng, (cout,), fan_in, dtype) if bias else None
        self.stride, self.pad = tuple(stride), tuple(pad)

    def __call__(self, x: Tensor, output_shape=None) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.pad, output_shape)


class BatchNorm2d(Module):
    def __init__(self, channels: int, *, dtype=np.float64):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.stats = RunningStats.zeros(channels, dtype=dtype)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.stats, self.training, mask=mask)


class ConvBlock(Module):
    """conv (or deconv) -> BN -> ELU."""

    def __init__(self, conv: Conv2d | ConvTranspose2d, channels: int, *, dtype=np.float64):
        self.conv = conv
        self.bn = BatchNorm2d(channels, dtype=dtype)

    def __call__(self, x: Tensor, mask=None, output_shape=None) -> Tensor:
        y = self.conv(x) if output_shape is None else self.conv(x, output_shape)
        return T.elu(self.bn(y, mask))


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


class ConvGruCell(Module):
    """Convolutional GRU whose output mixes the fresh feature and the candidate.

    ``z = sigmoid(Wz*h_hat + Uz*h)``, ``r = sigmoid(Wr*h_hat + Ur*h)``,
    ``n = tanh(Wn*h_hat + Un*(r . h))``, ``h' = (1 - z) . h_hat + z . n``.
    Input kernels carry the biases; state kernels are bias-free.
    """

    def __init__(self, channels: int, kernel=(1, 1), *, rng: np.random.Generator, dtype=np.float64):
        if kernel[0] % 2 == 0 or kernel[1] % 2 == 0:
            raise ConfigError(f"ConvGRU kernel must be odd to preserve shape, got {kernel}")
        pad = (kernel[0] // 2, kernel[0] // 2, kernel[1] // 2, kernel[1] // 2)
        mk = lambda bias: Conv2d(channels, channels, kernel, pad=pad, bias=bias, rng=rng, dtype=dtype)  # noqa: E731
        self.channels = channels
        self.w_z, self.w_r, self.w_n = mk(True), mk(True), mk(True)
        self.u_z, self.u_r, self.u_n = mk(False), mk(False), mk(False)

    def gates(self, h_hat: Tensor, h_prev: Tensor) -> dict[str, Tensor]:
        _same_shape(h_hat, h_prev, "ConvGRU")
        if h_hat.shape[1] != self.channels:
            raise DimensionError(f"ConvGRU expects {self.channels} channels, got {h_hat.shape}")
        z = T.sigmoid(self.w_z(h_hat) + self.u_z(h_prev))
        r = T.sigmoid(self.w_r(h_hat) + self.u_r(h_prev))
        n = T.tanh(self.w_n(h_hat) + self.u_n(r * h_prev))
        h = (1.0 - z) * h_hat + z * n
        return {"z": z, "r": r, "n": n, "h": h}

    def __call__(self, h_hat: Tensor, h_prev: Tensor) -> Tensor:
        return self.gates(h_hat, h_prev)["h"]


def conv_gru_step(cell: ConvGruCell, h_hat: Tensor, h_prev: Tensor) -> Tensor:
    return cell(h_hat, h_prev)


class AttentionGate(Module):
    """``y = q . sigmoid(BN(Wr * relu(BN(Wp * p) + BN(Wq * q))))`` with 1x1 kernels.

    The coefficient map has one channel and is broadcast over ``q``'s
    channels. Convolutions feeding a BN carry no bias.
    """

    def __init__(self, cp: int, cq: int, c_int: int | None = None, *, rng: np.random.Generator,
                 dtype=np.float64):
        c_int = c_int if c_int is not None else max(cq // 2, 4)
        self.c_int = c_int
        self.w_p = Conv2d(cp, c_int, bias=False, rng=rng, dtype=dtype)
        self.bn_p = BatchNorm2d(c_int, dtype=dtype)
        self.w_q = Conv2d(cq, c_int, bias=False, rng=rng, dtype=dtype)
        self.bn_q = BatchNorm2d(c_int, dtype=dtype)
        self.w_r = Conv2d(c_int, 1, bias=False, rng=rng, dtype=dtype)
        self.bn_r = BatchNorm2d(1, dtype=dtype)

    def coefficients(self, p: Tensor, q: Tensor, mask=None) -> Tensor:
        if p.shape[0] != q.shape[0] or p.shape[2:] != q.shape[2:]:
            raise DimensionError(f"attention gate needs matching batch/spatial dims, got {p.shape} and {q.shape}")
        joint = T.relu(self.bn_p(self.w_p(p), mask) + self.bn_q(self.w_q(q), mask))
        return T.sigmoid(self.bn_r(self.w_r(joint), mask))

    def __call__(self, p: Tensor, q: Tensor, mask=None) -> Tensor:
        return q * self.coefficients(p, q, mask)


def attention_gate(gate: AttentionGate, p: Tensor, q: Tensor, mask=None) -> Tensor:
    return gate(p, q, mask)


class GluBlock(Module):
    """Residual gated linear unit over time: ``x + proj(lin(x) . sigmoid(gate(x)))``.

    ``lin`` and ``gate`` are causal dilated 1-D convolutions (left padding
    only), so output frame ``t`` sees input frames ``<= t``.
    """

    def __init__(self, width: int, hidden: int, dilation: int = 1, kernel: int = 3, *,
                 rng: np.random.Generator, dtype=np.float64):
        if dilation < 1 or kernel < 1:
            raise ConfigError(f"GLU dilation ({dilation}) and kernel ({kernel}) must be >= 1")
        self.width, self.dilation, self.kernel = width, dilation, kernel
        pad = (dilation * (kernel - 1), 0, 0, 0)
        self.linear = Conv2d(width, hidden, (kernel, 1), pad=pad, dilation=(dilation, 1), rng=rng, dtype=dtype)
        self.gate = Conv2d(width, hidden, (kernel, 1), pad=pad, dilation=(dilation, 1), rng=rng, dtype=dtype)
        self.proj = Conv2d(hidden, width, bias=False, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.width:
            raise DimensionError(f"GLU block expects [B,{self.width},T], got {x.shape}")
        b, c, t = x.shape
        x4 = T.reshape(x, (b, c, t, 1))
        y = self.proj(self.linear(x4) * T.sigmoid(self.gate(x4)))
        return x + T.reshape(y, (b, c, t))


def glu_block(block: GluBlock, x: Tensor) -> Tensor:
    return block(x)
