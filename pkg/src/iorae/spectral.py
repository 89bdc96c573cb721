"""Discrete Fourier analysis and the prefix-sum transform behind the
low-frequency shaping of the attack noise.

The prefix-sum ("cumulative signal") transform turns a noise sequence into
one whose spectrum is boosted at low bin indices and damped at high ones;
`cumulative_gain` gives the closed-form magnitude of that reshaping and
`lowfreq_gain_ratio` measures it empirically on a concrete sequence.
"""
from __future__ import annotations

import numpy as np


def dft(signal) -> np.ndarray:
    """Forward DFT: bins X[k] = sum_n x[n] * exp(-2j*pi*k*n/N)."""
    x = np.asarray(signal, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty signal")
    return np.fft.fft(x)


def idft(spectrum) -> np.ndarray:
    """Inverse DFT, the exact inverse of dft()."""
    x = np.asarray(spectrum, dtype=np.complex128)
    if x.size == 0:
        raise ValueError("empty spectrum")
    return np.fft.ifft(x)


def cumulative_signal(delta, alpha: float) -> np.ndarray:
    """Scaled running prefix sum: out[n] = (1/alpha) * sum_{m<=n} delta[m]."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return np.cumsum(np.asarray(delta, dtype=np.float64)) / alpha


def cumulative_gain(n: int, k: int) -> float:
    """Closed-form spectral gain of the prefix sum at bin k of an n-point DFT.

    Equals 1/|1 - exp(-2j*pi*k/n)| = 1/(2*sin(pi*k/n)); large for k << n,
    0.5 at k = n/2.
    """
    if not 1 <= k < n:
        raise ValueError(f"bin index k={k} outside [1, {n})")
    return 1.0 / abs(1.0 - np.exp(-2j * np.pi * k / n))


def lowfreq_gain_ratio(delta, k: int) -> float:
    """Measured |DFT(prefix_sum(delta))[k]| / |DFT(delta)[k]|.

    Approaches cumulative_gain(len(delta), k) when the DC component of delta
    is small relative to bin k.
    """
    x = np.asarray(delta, dtype=np.float64)
    spec = dft(x)
    if not 1 <= k < x.size:
        raise ValueError(f"bin index k={k} outside [1, {x.size})")
    denom = abs(spec[k])
    if denom == 0.0:
        raise ZeroDivisionError(f"delta has no energy at bin {k}")
    return float(abs(dft(cumulative_signal(x, 1.0))[k]) / denom)
