"""MFCC-style feature extraction: framing, FFT, mel filterbank, DCT-II.

Frame count follows floor((len - frame) / hop) + 1 with no centering or edge
padding. The mel scale is the HTK convention 2595 * log10(1 + f / 700).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FeatureConfig",
    "fft_radix2",
    "frame_signal",
    "mel_filterbank",
    "dct_ii_matrix",
    "extract_mfcc",
    "extract_mfcc_batch",
]


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 4000
    frame_len_ms: float = 80.0
    hop_ms: float = 40.0
    n_mels: int = 24
    n_mfcc: int = 10
    window: str = "hamming"

    def __post_init__(self):
        if self.hop_ms > self.frame_len_ms:
            raise ValueError(f"hop {self.hop_ms} ms exceeds frame length {self.frame_len_ms} ms")
        if self.n_mfcc > self.n_mels:
            raise ValueError(f"n_mfcc {self.n_mfcc} exceeds n_mels {self.n_mels}")
        if self.window != "hamming":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def frame_samples(self) -> int:
        return int(round(self.sample_rate * self.frame_len_ms / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def n_fft(self) -> int:
        n = 1
        while n < self.frame_samples:
            n *= 2
        return n

    def n_frames(self, signal_len: int) -> int:
        if signal_len < self.frame_samples:
            raise ValueError(
                f"signal of {signal_len} samples shorter than one frame ({self.frame_samples})"
            )
        return (signal_len - self.frame_samples) // self.hop_samples + 1


def fft_radix2(x: np.ndarray, leaf: int = 32) -> np.ndarray:
    """Radix-2 Cooley-Tukey FFT over the last axis; length a power of two.

    Decimation in time with a direct-DFT leaf of size min(n, leaf): the
    decimated subsequences are transformed by one matrix product, then
    merged by vectorized butterfly passes. Batched over leading axes.
    """
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n == 0 or n & (n - 1):
        raise ValueError(f"fft length must be a power of two, got {n}")
    lead = x.shape[:-1]
    batch = int(np.prod(lead)) if lead else 1
    n_leaf = min(n, leaf)
    k = np.arange(n_leaf)
    dft = np.exp(-2j * np.pi * k[:, None] * k[None, :] / n_leaf)
    # column j of the (n_leaf, n/n_leaf) view is the j-th decimated subsequence
    y = np.einsum("km,bmj->bkj", dft, x.reshape(batch, n_leaf, n // n_leaf))
    while y.shape[1] < n:
        size, cols = y.shape[1], y.shape[2]
        twiddle = np.exp(-1j * np.pi * np.arange(size) / size)[None, :, None]
        even = y[:, :, : cols // 2]
        odd = twiddle * y[:, :, cols // 2 :]
        y = np.concatenate([even + odd, even - odd], axis=1)
    return y.reshape(*lead, n)


def frame_signal(signal: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Slice into overlapping frames: (n_frames, frame_samples)."""
    signal = np.asarray(signal, dtype=np.float64)
    n_frames = cfg.n_frames(signal.shape[-1])
    fl, hop = cfg.frame_samples, cfg.hop_samples
    starts = np.arange(n_frames) * hop
    return signal[starts[:, None] + np.arange(fl)[None, :]]


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: float) -> np.ndarray:
    """Triangular filters on the HTK mel scale: (n_mels, n_fft // 2 + 1)."""
    n_bins = n_fft // 2 + 1
    freqs = np.arange(n_bins) * sample_rate / n_fft
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, mid, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def dct_ii_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix (n x n); M @ M.T = I."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    mat = np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    mat *= np.sqrt(2.0 / n)
    mat[0] *= np.sqrt(0.5)
    return mat


def extract_mfcc(signal: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """One signal -> (1, n_mfcc, n_frames) float32 feature map."""
    return extract_mfcc_batch(np.asarray(signal)[None, :], cfg)[0]


def extract_mfcc_batch(signals: np.ndarray, cfg: FeatureConfig, chunk: int = 128) -> np.ndarray:
    """Batch of signals (N, len) -> (N, 1, n_mfcc, n_frames).

    Processed in chunks to bound the FFT workspace.
    """
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim != 2:
        raise ValueError(f"expected (N, len) signals, got shape {signals.shape}")
    cfg.n_frames(signals.shape[1])  # validate length up front
    out = [_mfcc_chunk(signals[lo : lo + chunk], cfg) for lo in range(0, signals.shape[0], chunk)]
    return np.concatenate(out) if len(out) > 1 else out[0]


def _mfcc_chunk(signals: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    n = signals.shape[0]
    n_frames = cfg.n_frames(signals.shape[1])
    starts = np.arange(n_frames) * cfg.hop_samples
    frames = signals[:, starts[:, None] + np.arange(cfg.frame_samples)[None, :]]  # (N, F, fl)
    window = np.hamming(cfg.frame_samples)
    padded = np.zeros((n, n_frames, cfg.n_fft))
    padded[:, :, : cfg.frame_samples] = frames * window
    spectrum = fft_radix2(padded)[..., : cfg.n_fft // 2 + 1]
    mag = np.abs(spectrum)
    fb = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate)
    mel = np.einsum("nfb,mb->nfm", mag, fb, optimize=True)
    logmel = np.log(mel + 1e-10)
    dct = dct_ii_matrix(cfg.n_mels)[: cfg.n_mfcc]
    mfcc = np.einsum("nfm,km->nkf", logmel, dct, optimize=True)
    return mfcc[:, None, :, :].astype(np.float32)
