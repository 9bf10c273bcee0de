import numpy as np
import pytest

from evexit.features import (
    FeatureConfig,
    dct_ii_matrix,
    extract_mfcc,
    extract_mfcc_batch,
    fft_radix2,
    frame_signal,
    mel_filterbank,
)


def naive_dft(x: np.ndarray) -> np.ndarray:
    """O(n^2) reference DFT over the last axis."""
    n = x.shape[-1]
    k = np.arange(n)
    mat = np.exp(-2j * np.pi * k[:, None] * k[None, :] / n)
    return np.einsum("...m,km->...k", x.astype(np.complex128), mat)


def test_fft_impulse_all_ones():
    mags = np.abs(fft_radix2(np.array([1.0, 0.0, 0.0, 0.0])))
    np.testing.assert_allclose(mags, np.ones(4), atol=1e-12)


def test_fft_vs_naive_dft_length_256():
    rng = np.random.default_rng(42)
    x = rng.normal(size=256)
    assert np.abs(fft_radix2(x) - naive_dft(x)).max() <= 1e-9


@pytest.mark.parametrize("n", [1, 2, 4, 8, 16, 32, 64, 128, 512])
def test_fft_vs_naive_dft_all_pow2(n):
    rng = np.random.default_rng(n)
    x = rng.normal(size=(3, n)) + 1j * rng.normal(size=(3, n))
    assert np.abs(fft_radix2(x) - naive_dft(x)).max() <= 1e-9


def test_fft_rejects_non_pow2():
    with pytest.raises(ValueError, match="power of two"):
        fft_radix2(np.zeros(12))


def test_mel_filterbank_rows_triangular():
    fb = mel_filterbank(24, 512, 4000)
    assert fb.shape == (24, 257)
    assert (fb.sum(axis=1) > 0).all()
    for row in fb:
        support = np.flatnonzero(row > 0)
        # contiguous support with a single peak
        assert np.array_equal(support, np.arange(support[0], support[-1] + 1))
        peak = row.argmax()
        assert (np.diff(row[support[0] : peak + 1]) >= 0).all()
        assert (np.diff(row[peak : support[-1] + 1]) <= 0).all()


def test_dct_matrix_orthogonal():
    m = dct_ii_matrix(24)
    np.testing.assert_allclose(m @ m.T, np.eye(24), atol=1e-9)
    np.testing.assert_allclose(m.T @ m, np.eye(24), atol=1e-9)


def test_feature_config_validation():
    with pytest.raises(ValueError, match="hop"):
        FeatureConfig(hop_ms=100.0, frame_len_ms=80.0)
    with pytest.raises(ValueError, match="n_mfcc"):
        FeatureConfig(n_mfcc=30, n_mels=24)


def test_n_fft_next_power_of_two():
    cfg = FeatureConfig(sample_rate=4000, frame_len_ms=80.0)  # 320 samples
    assert cfg.frame_samples == 320
    assert cfg.n_fft == 512
    assert FeatureConfig(sample_rate=4000, frame_len_ms=64.0).n_fft == 256


def test_mfcc_shape_oesense_style_config():
    # 4 kHz, 80 ms frames, 40 ms hop, 10 MFCC on a 1 s signal
    cfg = FeatureConfig(sample_rate=4000, frame_len_ms=80.0, hop_ms=40.0, n_mfcc=10)
    signal = np.random.default_rng(0).normal(size=4000)
    frames = (4000 - cfg.frame_samples) // cfg.hop_samples + 1
    out = extract_mfcc(signal, cfg)
    assert out.shape == (1, 10, frames)
    assert cfg.n_frames(4000) == frames


def test_mfcc_deterministic_and_pure():
    cfg = FeatureConfig()
    rng = np.random.default_rng(1)
    sig = rng.normal(size=4000)
    before = sig.copy()
    one = extract_mfcc(sig, cfg)
    two = extract_mfcc(sig, cfg)
    np.testing.assert_array_equal(one, two)
    np.testing.assert_array_equal(sig, before)


def test_mfcc_batch_matches_single():
    cfg = FeatureConfig()
    sigs = np.random.default_rng(2).normal(size=(5, 4000))
    batch = extract_mfcc_batch(sigs, cfg, chunk=2)
    for i in range(5):
        np.testing.assert_allclose(batch[i], extract_mfcc(sigs[i], cfg), atol=1e-6)


def test_signal_shorter_than_frame_errors():
    cfg = FeatureConfig()
    with pytest.raises(ValueError, match="shorter than one frame"):
        extract_mfcc(np.zeros(100), cfg)


def test_frame_signal_layout():
    cfg = FeatureConfig(sample_rate=10, frame_len_ms=400.0, hop_ms=200.0)  # 4/2 samples
    frames = frame_signal(np.arange(10.0), cfg)
    np.testing.assert_array_equal(frames[0], [0, 1, 2, 3])
    np.testing.assert_array_equal(frames[1], [2, 3, 4, 5])
    assert frames.shape == ((10 - 4) // 2 + 1, 4)
