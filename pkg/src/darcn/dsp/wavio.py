"""16-bit PCM mono WAV reading and writing (stdlib ``wave`` underneath)."""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

from ..errors import DataError
from .stft import SAMPLE_RATE, Waveform


def read_wav(path, expected_rate: int | None = SAMPLE_RATE) -> Waveform:
    """Read a mono 16-bit little-endian PCM file into floats in [-1, 1)."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate = f.getnchannels(), f.getsampwidth(), f.getframerate()
            if f.getcomptype() != "NONE":
                raise DataError(f"{path}: compressed WAV ({f.getcomptype()}) is not supported")
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: not a PCM WAV file ({exc})") from exc
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    if channels != 1:
        raise DataError(f"{path}: expected mono audio, found {channels} channels")
    if width != 2:
        raise DataError(f"{path}: expected 16-bit samples, found {8 * width}-bit")
    if expected_rate is not None and rate != expected_rate:
        raise DataError(f"{path}: expected {expected_rate} Hz, found {rate} Hz")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def quantize(samples: np.ndarray) -> np.ndarray:
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    return np.round(clipped * 32767.0).astype("<i2")


def write_wav(path, w) -> Path:
    """Clamp to [-1, 1] and write as 16-bit PCM."""
    if not isinstance(w, Waveform):
        w = Waveform(w)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(w.sample_rate))
        f.writeframes(quantize(w.samples).tobytes())
    return path
