"""Short-time Fourier analysis/synthesis and SNR-controlled mixing.

Frames start at sample 0 (no centering): a signal of length ``L`` gives
``1 + (L - win_length) // hop`` frames. Synthesis is weighted overlap-add
normalized by the per-sample sum of squared windows, which inverts the
analysis exactly on every sample covered by at least one frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError, DimensionError
from .fft import irfft, rfft

SAMPLE_RATE = 16000


def hamming(n: int, periodic: bool = True) -> np.ndarray:
    denom = n if periodic else n - 1
    return 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(n) / denom)


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 320
    win_length: int = 320
    hop: int = 160
    window: np.ndarray = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not 0 < self.hop <= self.win_length <= self.fft_size:
            raise ValueError(f"need 0 < hop <= win_length <= fft_size, got {self}")
        if self.window is None:
            object.__setattr__(self, "window", hamming(self.win_length))
        if len(self.window) != self.win_length:
            raise ValueError("window length must equal win_length")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return 1 + (max(n_samples, self.win_length) - self.win_length) // self.hop

    def covered_length(self, n_frames: int) -> int:
        """Number of leading samples that some frame covers."""
        return (n_frames - 1) * self.hop + self.win_length


PAPER_STFT = StftConfig()


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)


def _frames(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    if len(x) < cfg.win_length:
        x = np.pad(x, (0, cfg.win_length - len(x)))
    t = cfg.n_frames(len(x))
    idx = np.arange(cfg.win_length)[None, :] + cfg.hop * np.arange(t)[:, None]
    return x[idx]


def stft(w, cfg: StftConfig = PAPER_STFT) -> np.ndarray:
    """Complex spectrogram, shape (T, fft_size//2 + 1)."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if x.ndim != 1 or len(x) == 0:
        raise DataError("stft needs a non-empty 1-D waveform")
    frames = _frames(x, cfg) * cfg.window
    if cfg.fft_size > cfg.win_length:
        frames = np.pad(frames, ((0, 0), (0, cfg.fft_size - cfg.win_length)))
    return rfft(frames)


def magnitude(spec: np.ndarray) -> np.ndarray:
    return np.abs(spec)


def compose(mag: np.ndarray, phase_of: np.ndarray) -> np.ndarray:
    """Magnitude ``mag`` with the phase of ``phase_of``.

    A bin where ``phase_of`` is exactly zero has no phase to lend and stays
    zero, so silence in the noisy input stays silent.
    """
    mag = np.asarray(mag)
    if mag.shape != np.shape(phase_of):
        raise DimensionError(f"magnitude {mag.shape} and phase source {np.shape(phase_of)} differ")
    src = np.asarray(phase_of)
    size = np.abs(src)
    unit = np.divide(src, size, out=np.zeros(src.shape, dtype=complex), where=size > 0)
    return mag * unit


def istft(spec: np.ndarray, cfg: StftConfig = PAPER_STFT, phase_source: np.ndarray | None = None,
          length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    With ``phase_source``, ``spec`` is read as a magnitude and combined
    with that spectrogram's phase first. ``length`` trims or zero-extends
    the output to the original signal length.
    """
    spec = np.asarray(spec)
    if phase_source is not None:
        spec = compose(np.abs(spec) if np.iscomplexobj(spec) else spec, phase_source)
    if spec.ndim != 2 or spec.shape[1] != cfg.n_bins:
        raise DimensionError(f"expected (T, {cfg.n_bins}) spectrogram, got {spec.shape}")
    n_frames = spec.shape[0]
    frames = irfft(spec, cfg.fft_size)[:, : cfg.win_length] * cfg.window
    total = cfg.covered_length(n_frames)
    out = np.zeros(total)
    norm = np.zeros(total)
    wsq = cfg.window ** 2
    for t in range(n_frames):
        s = t * cfg.hop
        out[s:s + cfg.win_length] += frames[t]
        norm[s:s + cfg.win_length] += wsq
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    if length is not None:
        out = out[:length] if length <= total else np.pad(out, (0, length - total))
    return out


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def snr_db(signal: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * np.log10(power(signal) / power(noise))


def mix_at_snr(s, d, snr: float) -> tuple[np.ndarray, float]:
    """Scale noise ``d`` so that ``s`` sits ``snr`` dB above it; return (s + alpha*d, alpha).

    ``d`` is truncated to ``len(s)``; powers are means over the whole
    utterance.
    """
    s = s.samples if isinstance(s, Waveform) else np.asarray(s, dtype=np.float64)
    d = d.samples if isinstance(d, Waveform) else np.asarray(d, dtype=np.float64)
    if len(d) < len(s):
        raise DataError(f"noise ({len(d)} samples) shorter than speech ({len(s)})")
    d = d[: len(s)]
    ps, pd = power(s), power(d)
    if ps == 0 or pd == 0:
        raise DataError("cannot mix at an SNR with a silent speech or noise signal")
    alpha = float(np.sqrt(ps / (pd * 10.0 ** (snr / 10.0))))
    return s + alpha * d, alpha
