"""The attention generator (AGM), noise reduction module (NRM) and their
recursive unfolding over ``Q`` stages with shared weights.

Spectrogram tensors are laid out [batch, channel, time, frequency]. Every
convolution over time is causal (kernel 2, one past frame), so a frame's
estimate never depends on later frames.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .conv import conv_output_size
from .dsp import StftConfig
from .errors import ConfigError, ContractError, DimensionError
from .nn import AttentionGate, BatchNorm2d, Conv2d, ConvBlock, ConvGruCell, ConvTranspose2d, GluBlock, Module
from .tensor import Tensor


@dataclass(frozen=True)
class ArchConfig:
    name: str = "paper"
    n_freq: int = 161
    stages: int = 3
    agm_enc_channels: tuple[int, ...] = (16, 32, 32, 64, 64)
    agm_dec_channels: tuple[int, ...] = (64, 64, 32, 32, 16)
    nrm_enc_channels: tuple[int, ...] = (16, 16, 32, 32, 64, 64)
    nrm_dec_channels: tuple[int, ...] = (64, 32, 32, 16, 16, 1)
    srnn_channels: int = 16
    kernel: tuple[int, int] = (2, 5)
    stride: tuple[int, int] = (1, 2)
    agm_freq_pads: tuple[int, ...] = (2, 2, 2, 2, 2)
    nrm_freq_pads: tuple[int, ...] = (2, 2, 2, 2, 2, 3)
    glu_count: int = 6
    glu_hidden: int = 64
    glu_kernel: int = 3
    glu_dilations: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    bottleneck_width: int = 256

    def __post_init__(self):
        if self.stages < 1:
            raise ConfigError(f"stage count must be >= 1, got {self.stages}")
        if len(self.agm_dec_channels) != len(self.agm_enc_channels):
            raise ConfigError("AGM encoder/decoder depth mismatch")
        if len(self.nrm_dec_channels) != len(self.nrm_enc_channels):
            raise ConfigError("NRM encoder/decoder depth mismatch")
        if len(self.agm_freq_pads) != len(self.agm_enc_channels):
            raise ConfigError("one AGM frequency padding per encoder layer is required")
        if len(self.nrm_freq_pads) != len(self.nrm_enc_channels):
            raise ConfigError("one NRM frequency padding per encoder layer is required")
        if len(self.glu_dilations) != self.glu_count:
            raise ConfigError("one dilation per GLU block is required")
        if self.nrm_dec_channels[-1] != 1:
            raise ConfigError("the last NRM decoder layer must produce one channel")
        for sizes, who in ((self.agm_freq_sizes, "AGM"), (self.nrm_freq_sizes, "NRM")):
            if min(sizes) < 1:
                raise ConfigError(f"{who} frequency paddings collapse F={self.n_freq}: {sizes}")
        width = self.nrm_enc_channels[-1] * self.nrm_freq_sizes[-1]
        if width != self.bottleneck_width:
            raise ConfigError(f"NRM encoder ends at {self.nrm_enc_channels[-1]}x{self.nrm_freq_sizes[-1]}"
                              f" = {width}, expected bottleneck width {self.bottleneck_width}")
        self.gate_targets  # validates the pairing

    def _sizes(self, pads) -> tuple[int, ...]:
        sizes = [self.n_freq]
        for p in pads:
            sizes.append(conv_output_size(sizes[-1], self.kernel[1], self.stride[1], p, p))
        return tuple(sizes)

    @property
    def agm_freq_sizes(self) -> tuple[int, ...]:
        """F before the first and after each AGM encoder layer."""
        return self._sizes(self.agm_freq_pads)

    @property
    def nrm_freq_sizes(self) -> tuple[int, ...]:
        """F at the SRNN output and after each NRM encoder layer."""
        return self._sizes(self.nrm_freq_pads)

    @property
    def gate_targets(self) -> tuple[int, ...]:
        """NRM feature index modulated by each AGM decoder output.

        Feature ``k`` is the input of NRM encoder layer ``k + 1`` (0 is the
        SRNN output). Pairing is by frequency size.
        """
        agm = self.agm_freq_sizes
        nrm = self.nrm_freq_sizes[:-1]
        depth = len(self.agm_enc_channels)
        targets = []
        for j in range(depth):
            f = agm[depth - 1 - j]
            matches = [k for k, n in enumerate(nrm) if n == f and k not in targets]
            if not matches:
                raise ConfigError(f"AGM decoder output {j} (F={f}) matches no NRM encoder feature {nrm}")
            targets.append(matches[0])
        return tuple(targets)

    @property
    def fft_size(self) -> int:
        return 2 * (self.n_freq - 1)

    def stft_config(self) -> StftConfig:
        """Analysis settings implied by the feature length (20 ms / 10 ms at F=161)."""
        return StftConfig(self.fft_size, self.fft_size, self.fft_size // 2)

    def scaled(self, factor: int) -> "ArchConfig":
        """Same topology with every channel width multiplied by ``factor``."""
        mul = lambda chans: tuple(c * factor for c in chans)  # noqa: E731
        return replace(self, agm_enc_channels=mul(self.agm_enc_channels),
                       agm_dec_channels=mul(self.agm_dec_channels),
                       nrm_enc_channels=mul(self.nrm_enc_channels),
                       nrm_dec_channels=mul(self.nrm_dec_channels[:-1]) + (1,),
                       srnn_channels=self.srnn_channels * factor, glu_hidden=self.glu_hidden * factor,
                       bottleneck_width=self.bottleneck_width * factor)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


PAPER = ArchConfig()
TINY = ArchConfig(
    name="tiny", n_freq=17, stages=2,
    agm_enc_channels=(2, 4, 4, 8, 8), agm_dec_channels=(8, 8, 4, 4, 2),
    nrm_enc_channels=(2, 2, 4, 4, 8, 8), nrm_dec_channels=(8, 4, 4, 2, 2, 1),
    srnn_channels=2, nrm_freq_pads=(2, 2, 2, 2, 2, 2), glu_hidden=4, bottleneck_width=8,
)
PRESETS = {"paper": PAPER, "tiny": TINY}


def preset(name: str) -> ArchConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class AttentionSet:
    """Sigmoid gate maps, one per AGM decoder layer, with their NRM targets."""

    maps: list[Tensor]
    targets: tuple[int, ...]

    def for_feature(self, k: int) -> Tensor | None:
        for m, t in zip(self.maps, self.targets):
            if t == k:
                return m
        return None


@dataclass
class SrnnState:
    h: Tensor


@dataclass
class StageTrace:
    estimate: Tensor  # (B, T, F), Softplus output
    attention: AttentionSet
    state: SrnnState
    bottleneck_shape: tuple[int, ...]
    stage_loss: Tensor | None = None
    extras: dict = field(default_factory=dict)


def _causal(p: int) -> tuple[int, int, int, int]:
    return (1, 0, p, p)


def _causal_adjoint(p: int) -> tuple[int, int, int, int]:
    # crop the trailing frame so the deconv stays causal
    return (0, 1, p, p)


def _frame_mask(mask: np.ndarray | None) -> np.ndarray | None:
    if mask is None:
        return None
    m = np.asarray(mask)
    return m.reshape(m.shape[0], 1, m.shape[1], 1)


class AttentionGenerator(Module):
    """U-Net whose decoder features become sigmoid gate maps."""

    def __init__(self, cfg: ArchConfig, nrm_feature_channels, *, rng, dtype):
        k, s = cfg.kernel, cfg.stride
        enc, dec = cfg.agm_enc_channels, cfg.agm_dec_channels
        self.cfg = cfg
        cin = 2
        self.enc = []
        for c, p in zip(enc, cfg.agm_freq_pads):
            self.enc.append(ConvBlock(Conv2d(cin, c, k, s, _causal(p), bias=False, rng=rng, dtype=dtype), c, dtype=dtype))
            cin = c
        self.dec = []
        depth = len(enc)
        for j, c in enumerate(dec):
            cin = enc[-1] if j == 0 else dec[j - 1] + enc[depth - 1 - j]
            p = cfg.agm_freq_pads[depth - 1 - j]
            self.dec.append(ConvBlock(ConvTranspose2d(cin, c, k, s, _causal_adjoint(p), bias=False, rng=rng,
                                                      dtype=dtype), c, dtype=dtype))
        self.pointwise = [Conv2d(c, nrm_feature_channels[t], rng=rng, dtype=dtype)
                          for c, t in zip(dec, cfg.gate_targets)]

    def __call__(self, x_in: Tensor, mask=None) -> AttentionSet:
        sizes = self.cfg.agm_freq_sizes
        if x_in.ndim != 4 or x_in.shape[1] != 2 or x_in.shape[3] != sizes[0]:
            raise ContractError(f"AGM expects [B,2,T,{sizes[0]}], got {x_in.shape}")
        t = x_in.shape[2]
        feats = []
        e = x_in
        for layer in self.enc:
            e = layer(e, mask)
            feats.append(e)
        depth = len(self.enc)
        d = e
        maps = []
        for j, layer in enumerate(self.dec):
            inp = d if j == 0 else T.concat([d, feats[depth - 1 - j]], axis=1)
            d = layer(inp, mask, output_shape=(t, sizes[depth - 1 - j]))
            maps.append(T.sigmoid(self.pointwise[j](d)))
        return AttentionSet(maps, self.cfg.gate_targets)


class NoiseReducer(Module):
    """SRNN -> gated conv encoder -> GLU bottleneck -> attention-gated deconv decoder."""

    def __init__(self, cfg: ArchConfig, *, rng, dtype):
        k, s = cfg.kernel, cfg.stride
        enc, dec = cfg.nrm_enc_channels, cfg.nrm_dec_channels
        self.cfg = cfg
        cs = cfg.srnn_channels
        self.srnn_conv = ConvBlock(Conv2d(2, cs, k, (1, 1), _causal(k[1] // 2), bias=False, rng=rng, dtype=dtype),
                                   cs, dtype=dtype)
        self.srnn_cell = ConvGruCell(cs, rng=rng, dtype=dtype)
        self.enc = []
        cin = cs
        for c, p in zip(enc, cfg.nrm_freq_pads):
            self.enc.append(ConvBlock(Conv2d(cin, c, k, s, _causal(p), bias=False, rng=rng, dtype=dtype), c, dtype=dtype))
            cin = c
        self.glu = [GluBlock(cfg.bottleneck_width, cfg.glu_hidden, d, cfg.glu_kernel, rng=rng, dtype=dtype)
                    for d in cfg.glu_dilations]
        depth = len(enc)
        self.gates = []
        self.dec = []
        p_ch = enc[-1]
        for i, c in enumerate(dec):
            q_ch = enc[depth - 1 - i]
            self.gates.append(AttentionGate(p_ch, q_ch, rng=rng, dtype=dtype))
            p = cfg.nrm_freq_pads[depth - 1 - i]
            self.dec.append(ConvBlock(ConvTranspose2d(p_ch + q_ch, c, k, s, _causal_adjoint(p), bias=False,
                                                      rng=rng, dtype=dtype), c, dtype=dtype))
            p_ch = c
        self.out = Conv2d(dec[-1], 1, rng=rng, dtype=dtype)

    @property
    def feature_channels(self) -> tuple[int, ...]:
        return (self.cfg.srnn_channels,) + tuple(self.cfg.nrm_enc_channels)

    def initial_state(self, batch: int, frames: int, dtype) -> SrnnState:
        shape = (batch, self.cfg.srnn_channels, frames, self.cfg.n_freq)
        return SrnnState(Tensor(np.zeros(shape, dtype=dtype)))

    def __call__(self, x_in: Tensor, attention: AttentionSet | None, state: SrnnState, mask=None):
        cfg = self.cfg
        sizes = cfg.nrm_freq_sizes
        b, _, t, f = x_in.shape
        if state.h.shape != (b, cfg.srnn_channels, t, f):
            raise ContractError(f"SRNN state {state.h.shape} does not match input {x_in.shape}")
        h = self.srnn_cell(self.srnn_conv(x_in, mask), state.h)
        feat = h
        skips = []
        for k, layer in enumerate(self.enc):
            a = attention.for_feature(k) if attention is not None else None
            if a is not None:
                feat = feat * a
            if k > 0:
                skips.append(feat)
            feat = layer(feat, mask)
        skips.append(feat)

        c6, f6 = feat.shape[1], feat.shape[3]
        flat = T.reshape(T.transpose(feat, (0, 2, 1, 3)), (b, t, c6 * f6))
        bottleneck_shape = flat.shape
        seq = T.transpose(flat, (0, 2, 1))
        for block in self.glu:
            seq = block(seq)
        p = T.transpose(T.reshape(T.transpose(seq, (0, 2, 1)), (b, t, c6, f6)), (0, 2, 1, 3))

        depth = len(self.dec)
        for i, (gate, layer) in enumerate(zip(self.gates, self.dec)):
            q = skips[depth - 1 - i]
            y = gate(p, q, mask)
            p = layer(T.concat([p, y], axis=1), mask, output_shape=(t, sizes[depth - 1 - i]))
        est = T.softplus(self.out(p))
        return T.reshape(est, (b, t, f)), SrnnState(h), bottleneck_shape


class DarcnModel(Module):
    """AGM and NRM sharing one parameter set across all recursive stages."""

    def __init__(self, cfg: ArchConfig = PAPER, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.nrm = NoiseReducer(cfg, rng=rng, dtype=self.dtype)
        self.agm = AttentionGenerator(cfg, self.nrm.feature_channels, rng=rng, dtype=self.dtype)

    def theta_a(self) -> list[Tensor]:
        return self.agm.parameters()

    def theta_r(self) -> list[Tensor]:
        return self.nrm.parameters()

    def forward(self, mag_noisy, stages: int | None = None, mask=None, gate_override=None) -> list[StageTrace]:
        return darcn_forward(self, mag_noisy, stages, mask, gate_override)

    __call__ = forward


def _as_batch(mag, dtype) -> Tensor:
    t = mag if isinstance(mag, Tensor) else Tensor(np.asarray(mag, dtype=dtype))
    if t.ndim == 2:
        t = T.reshape(t, (1,) + t.shape)
    return t


def stack_input(mag_noisy: Tensor, previous: Tensor) -> Tensor:
    """(B,T,F) noisy and previous estimate -> (B,2,T,F) network input."""
    b, t, f = mag_noisy.shape
    return T.concat([T.reshape(mag_noisy, (b, 1, t, f)), T.reshape(previous, (b, 1, t, f))], axis=1)


def agm_forward(model: DarcnModel, x_in: Tensor, mask=None) -> AttentionSet:
    return model.agm(x_in, _frame_mask(mask))


def nrm_forward(model: DarcnModel, x_in: Tensor, attention: AttentionSet | None, state: SrnnState, mask=None):
    """One NRM pass; returns (estimate (B,T,F), new state, bottleneck shape)."""
    return model.nrm(x_in, attention, state, _frame_mask(mask))


def darcn_forward(model: DarcnModel, mag_noisy, stages: int | None = None, mask=None,
                  gate_override=None) -> list[StageTrace]:
    """Unfold ``stages`` recursive passes; stage 1 is fed ``|X|`` as its previous estimate.

    ``gate_override`` replaces every AGM map by a constant (e.g. 1.0 to
    cut the AGM out of the NRM) and is meant for diagnostics.
    """
    q = model.cfg.stages if stages is None else stages
    if q < 1:
        raise ConfigError(f"stage count must be >= 1, got {q}")
    x = _as_batch(mag_noisy, model.dtype)
    if x.ndim != 3 or x.shape[2] != model.cfg.n_freq:
        raise DimensionError(f"expected (B,T,{model.cfg.n_freq}) magnitudes, got {x.shape}")
    b, t, _ = x.shape
    fmask = _frame_mask(mask)
    state = model.nrm.initial_state(b, t, x.dtype)
    prev = x
    traces = []
    for _ in range(q):
        x_in = stack_input(x, prev)
        att = model.agm(x_in, fmask)
        if gate_override is not None:
            att = AttentionSet([Tensor(np.full(m.shape, gate_override, dtype=m.dtype)) for m in att.maps],
                               att.targets)
        est, state, bshape = model.nrm(x_in, att, state, fmask)
        traces.append(StageTrace(est, att, state, bshape))
        prev = est
    return traces


def masked_mse(est: Tensor, target, mask=None) -> Tensor:
    """Mean squared error over valid (unpadded) T x F entries."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=est.dtype))
    if est.shape != target.shape:
        raise DimensionError(f"estimate {est.shape} and target {target.shape} differ")
    err = T.square(est - target)
    if mask is None:
        return T.mean(err)
    m = np.asarray(mask, dtype=est.dtype)[:, :, None]
    count = float(m.sum()) * est.shape[2]
    return T.mul(T.tsum(err * m), 1.0 / count)


def accumulated_loss(traces: list[StageTrace], target, lambdas=None, mask=None) -> Tensor:
    """``sum_l lambda_l * D_l`` with D_l the masked MSE of stage ``l``; fills ``stage_loss``."""
    lambdas = [1.0] * len(traces) if lambdas is None else list(lambdas)
    if len(lambdas) != len(traces):
        raise ContractError(f"{len(lambdas)} weights for {len(traces)} stages")
    total = None
    for lam, tr in zip(lambdas, traces):
        tr.stage_loss = masked_mse(tr.estimate, target, mask)
        term = T.mul(tr.stage_loss, lam)
        total = term if total is None else total + term
    return total


def count_parameters(model: DarcnModel, depth: int = 2) -> tuple[list[tuple[str, int]], int]:
    """Trainable scalars grouped by the first ``depth`` name components."""
    table: dict[str, int] = {}
    for name, p in model.named_parameters():
        key = ".".join(name.split(".")[:depth])
        table[key] = table.get(key, 0) + p.size
    rows = list(table.items())
    return rows, sum(n for _, n in rows)


def format_parameter_table(model: DarcnModel, target_millions: float | None = 1.23) -> str:
    rows, total = count_parameters(model)
    width = max(len(n) for n, _ in rows)
    lines = [f"{'layer':<{width}}  {'params':>10}"]
    lines += [f"{n:<{width}}  {c:>10d}" for n, c in rows]
    lines.append(f"{'total':<{width}}  {total:>10d}")
    summary = f"total = {total / 1e6:.3f} M"
    if target_millions is not None:
        summary += f" (reference {target_millions:.2f} M)"
    lines.append(summary)
    return "\n".join(lines)
