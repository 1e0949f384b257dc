"""Morlet CWT and the fixed-size normalized scalogram tensor.

The transform is a zero-padded linear correlation of the window with each
scaled atom, evaluated through the FFT with a cached kernel bank.
"""

from __future__ import annotations

import functools
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import fft as sp_fft

from usvfog.signal_core import RATE_HZ, WINDOW_SAMPLES

OMEGA0 = 6.0
N_CHANNELS = 6
N_ROWS = 150
N_COLS = 192
SCG_MAGIC = b"SCG1"


@dataclass(frozen=True)
class FrequencyGrid:
    n_bins: int = N_ROWS
    f_min: float = 0.25
    f_max: float = 10.0

    def __post_init__(self):
        if not (0 < self.f_min < self.f_max <= 10.0) or self.n_bins < 2:
            raise ValueError("grid needs 0 < f_min < f_max <= 10 Hz and >= 2 bins")

    @property
    def frequencies(self) -> np.ndarray:
        k = np.arange(self.n_bins)
        return self.f_min * (self.f_max / self.f_min) ** (k / (self.n_bins - 1))

    def scales(self, rate_hz: float = RATE_HZ) -> np.ndarray:
        """Scale in samples for each bin."""
        return OMEGA0 * rate_hz / (2 * np.pi * self.frequencies)


DEFAULT_GRID = FrequencyGrid()


def morlet(t: np.ndarray, omega0: float = OMEGA0) -> np.ndarray:
    """Complex Morlet atom pi^-1/4 exp(i w0 t) exp(-t^2/2)."""
    return np.pi ** -0.25 * np.exp(1j * omega0 * t) * np.exp(-0.5 * t * t)


@functools.lru_cache(maxsize=8)
def _kernel_bank(grid: FrequencyGrid, n: int, rate_hz: float) -> tuple[np.ndarray, int]:
    """FFT of s^-1/2 conj(psi(lag/s)) over lags -(n-1)..(n-1) for every scale."""
    lags = np.arange(-(n - 1), n)
    s = grid.scales(rate_hz)[:, None]
    atoms = np.conj(morlet(lags[None, :] / s)) / np.sqrt(s)
    # only outputs n-1..2n-2 of the full convolution are kept, so 2n-1 points
    # are enough to keep them free of circular wrap-around
    nfft = sp_fft.next_fast_len(2 * n - 1)
    # correlation with the atom == convolution with the lag-reversed atom
    bank = sp_fft.fft(atoms[:, ::-1], nfft, axis=1)
    bank.setflags(write=False)
    return bank, nfft


def morlet_cwt_batch(signals: np.ndarray, grid: FrequencyGrid = DEFAULT_GRID, rate_hz: float = RATE_HZ) -> np.ndarray:
    """CWT magnitude for a stack of signals: (C, n) -> (C, n_bins, n)."""
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim != 2:
        raise ValueError("expected a (channels, samples) array")
    if not np.all(np.isfinite(signals)):
        raise ValueError("signal contains non-finite values")
    n = signals.shape[1]
    bank, nfft = _kernel_bank(grid, n, float(rate_hz))
    spec = sp_fft.fft(signals, nfft, axis=1)
    full = sp_fft.ifft(spec[:, None, :] * bank[None, :, :], axis=2)
    # output index n of the full convolution sits at n + (n_samples - 1)
    return np.abs(full[:, :, n - 1:2 * n - 1])


def morlet_cwt(signal: np.ndarray, grid: FrequencyGrid = DEFAULT_GRID, rate_hz: float = RATE_HZ) -> np.ndarray:
    """Magnitude matrix (n_bins, 500) for one 500-sample window."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.shape != (WINDOW_SAMPLES,):
        raise ValueError(f"expected {WINDOW_SAMPLES} samples, got shape {signal.shape}")
    return morlet_cwt_batch(signal[None, :], grid, rate_hz)[0]


def morlet_cwt_direct(signal: np.ndarray, grid: FrequencyGrid = DEFAULT_GRID, rate_hz: float = RATE_HZ) -> np.ndarray:
    """Reference evaluation by explicit inner products with every shifted atom.

    O(bins * n^2); meant for short signals and cross-checks.
    """
    signal = np.asarray(signal, dtype=np.float64)
    n = signal.size
    idx = np.arange(n)
    out = np.empty((grid.n_bins, n))
    for k, s in enumerate(grid.scales(rate_hz)):
        for c in range(n):
            atom = morlet((idx - c) / s) / np.sqrt(s)
            out[k, c] = abs(np.sum(signal * np.conj(atom)))
    return out


def pool_edges(n_in: int = WINDOW_SAMPLES, n_out: int = N_COLS) -> np.ndarray:
    """Column boundaries round(j * n_in / n_out) for j = 0..n_out."""
    return np.array([round(j * n_in / n_out) for j in range(n_out + 1)])


def to_scalogram(mags) -> np.ndarray:
    """Mean-pool six (150, 500) magnitude matrices to 192 columns and max-normalize per channel.

    Returns a float32 (6, 150, 192) array in [0, 1].
    """
    mags = np.asarray(mags, dtype=np.float64)
    if mags.ndim != 3 or mags.shape[0] != N_CHANNELS:
        raise ValueError(f"expected {N_CHANNELS} matrices, got shape {mags.shape}")
    edges = pool_edges(mags.shape[2], N_COLS)
    widths = np.diff(edges)
    pooled = np.add.reduceat(mags, edges[:-1], axis=2) / widths
    peak = pooled.max(axis=(1, 2), keepdims=True)
    safe = np.where(peak > 0, peak, 1.0)
    out = np.where(peak > 0, pooled / safe, 0.0)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def window_scalogram(channels: np.ndarray, grid: FrequencyGrid = DEFAULT_GRID, rate_hz: float = RATE_HZ) -> np.ndarray:
    """(6, 500) raw window channels -> (6, 150, 192) scalogram."""
    channels = np.asarray(channels, dtype=np.float64)
    if channels.shape != (N_CHANNELS, WINDOW_SAMPLES):
        raise ValueError(f"expected ({N_CHANNELS}, {WINDOW_SAMPLES}) channels, got {channels.shape}")
    return to_scalogram(morlet_cwt_batch(channels, grid, rate_hz))


# ---------------------------------------------------------------- fixtures / rendering


def scalogram_bytes(scalogram: np.ndarray) -> bytes:
    """SCG1 encoding: magic, u32 ndim, u32 dims, then little-endian f32 data (C order)."""
    arr = np.ascontiguousarray(scalogram, dtype="<f4")
    header = SCG_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def scalogram_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != SCG_MAGIC:
        raise ValueError("not an SCG1 scalogram (bad magic)")
    if len(blob) < 8:
        raise ValueError("truncated SCG1 header")
    (ndim,) = struct.unpack_from("<I", blob, 4)
    hdr = 8 + 4 * ndim
    if len(blob) < hdr:
        raise ValueError("truncated SCG1 header")
    dims = struct.unpack_from(f"<{ndim}I", blob, 8)
    count = int(np.prod(dims))
    if len(blob) != hdr + 4 * count:
        raise ValueError(f"SCG1 payload length {len(blob) - hdr} != {4 * count}")
    return np.frombuffer(blob, dtype="<f4", offset=hdr).reshape(dims).astype(np.float32)


def save_scalogram(path, scalogram: np.ndarray) -> None:
    Path(path).write_bytes(scalogram_bytes(scalogram))


def load_scalogram(path) -> np.ndarray:
    return scalogram_from_bytes(Path(path).read_bytes())


def scalogram_digest(scalogram: np.ndarray) -> str:
    return hashlib.sha256(scalogram_bytes(scalogram)).hexdigest()


def render_channel_png(scalogram: np.ndarray, channel: int, path) -> None:
    """Write one channel as a 192x150 grayscale RGB PNG, low frequencies at the bottom."""
    from PIL import Image

    if not 0 <= channel < scalogram.shape[0]:
        raise ValueError(f"channel must be in 0..{scalogram.shape[0] - 1}")
    gray = np.round(np.clip(scalogram[channel], 0.0, 1.0) * 255).astype(np.uint8)[::-1]
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
