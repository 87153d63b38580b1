"""Mixed-radix Cooley-Tukey FFT along the last axis.

The transform length is factored into small primes (2, 3, 5 favoured, any
prime falls back to a direct DFT of that size). Each level splits the
input into ``p`` decimated sub-sequences, transforms them recursively, and
merges them with a twiddle multiply followed by a ``p``-point DFT, all
vectorized over leading axes so a whole spectrogram is one call.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


def factorize(n: int) -> tuple[int, ...]:
    if n < 1:
        raise ValueError(f"FFT length must be positive, got {n}")
    factors = []
    for p in (4, 2, 3, 5):
        while n % p == 0 and n > 1:
            # radix-4 first keeps recursion shallow for powers of two
            factors.append(p)
            n //= p
    q = 7
    while n > 1:
        while n % q == 0:
            factors.append(q)
            n //= q
        q += 2
    return tuple(factors)


@lru_cache(maxsize=None)
def _dft_matrix(p: int) -> np.ndarray:
    k = np.arange(p)
    return np.exp(-2j * np.pi * np.outer(k, k) / p)


@lru_cache(maxsize=None)
def _twiddles(n: int, p: int) -> np.ndarray:
    m = n // p
    return np.exp(-2j * np.pi * np.outer(np.arange(p), np.arange(m)) / n)


def _fft(x: np.ndarray, factors: tuple[int, ...]) -> np.ndarray:
    n = x.shape[-1]
    if n == 1:
        return x.astype(np.complex128, copy=True)
    p = factors[0]
    m = n // p
    if m == 1:
        return x @ _dft_matrix(p).T
    # sub[..., r, :] is the length-m transform of x[..., r::p]
    sub = _fft(x.reshape(x.shape[:-1] + (m, p)).swapaxes(-1, -2), factors[1:])
    sub = sub * _twiddles(n, p)
    # X[q*m + k] = sum_r W_p^{rq} sub[r, k]
    out = np.einsum("qr,...rk->...qk", _dft_matrix(p), sub)
    return out.reshape(x.shape[:-1] + (n,))


def fft(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return _fft(x.astype(np.complex128), factorize(x.shape[-1]))


def ifft(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.complex128)
    return np.conj(fft(np.conj(X))) / X.shape[-1]


def rfft(x: np.ndarray) -> np.ndarray:
    """One-sided spectrum (bins 0..n/2) of real input."""
    x = np.asarray(x, dtype=np.float64)
    return fft(x)[..., : x.shape[-1] // 2 + 1]


def irfft(X: np.ndarray, n: int) -> np.ndarray:
    """Real signal of length ``n`` whose one-sided spectrum is ``X``."""
    X = np.asarray(X, dtype=np.complex128)
    half = n // 2 + 1
    if X.shape[-1] != half:
        raise ValueError(f"expected {half} bins for length {n}, got {X.shape[-1]}")
    tail = np.conj(X[..., 1:(n + 1) // 2][..., ::-1])
    full = np.concatenate([X, tail], axis=-1)
    return ifft(full).real


def dft(x: np.ndarray) -> np.ndarray:
    """O(n^2) transform straight from the definition; the reference oracle."""
    x = np.asarray(x, dtype=np.complex128)
    return x @ _dft_matrix(x.shape[-1]).T
