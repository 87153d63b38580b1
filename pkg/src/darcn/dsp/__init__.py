"""Waveform <-> time-frequency conversion, mixing and WAV I/O."""

from .fft import dft, fft, ifft, irfft, rfft
from .stft import (PAPER_STFT, SAMPLE_RATE, StftConfig, Waveform, compose, hamming, istft,
                   magnitude, mix_at_snr, power, snr_db, stft)
from .wavio import read_wav, write_wav

__all__ = [
    "PAPER_STFT", "SAMPLE_RATE", "StftConfig", "Waveform", "compose", "dft", "fft", "hamming", "ifft",
    "irfft", "istft", "magnitude", "mix_at_snr", "power", "read_wav", "rfft", "snr_db", "stft", "write_wav",
]
