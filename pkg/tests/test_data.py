import numpy as np
import pytest

from evexit.data import Dataset, DatasetError, corrupt, gen_synthetic, smote_upsample
from evexit.features import fft_radix2


def test_gen_synthetic_deterministic(tmp_path):
    a = gen_synthetic(3, 20, seed=7, duration=0.5)
    b = gen_synthetic(3, 20, seed=7, duration=0.5)
    for split in a.signals:
        np.testing.assert_array_equal(a.signals[split], b.signals[split])
        np.testing.assert_array_equal(a.labels[split], b.labels[split])
    a.save(tmp_path / "one")
    b.save(tmp_path / "two")
    for f in ("manifest.json", "train.csv", "test.csv"):
        assert (tmp_path / "one" / f).read_bytes() == (tmp_path / "two" / f).read_bytes()


def test_gen_synthetic_counts_and_onehot():
    ds = gen_synthetic(3, 200, seed=0, n_test=0)
    assert ds.signals["train"].shape[0] == 600
    sums = ds.labels["train"].sum(axis=0)
    np.testing.assert_array_equal(sums, [200, 200, 200])
    assert (ds.labels["train"].sum(axis=1) == 1).all()


def test_gen_synthetic_high_snr_dominant_bin():
    # noise amplitude ~ 0: the dominant FFT bin must sit at the event tone
    ds = gen_synthetic(2, 4, snr_db_range=(300.0, 300.0), seed=1, n_test=0)
    sr = ds.sample_rate
    n = ds.signal_len
    freqs = [sr * (c + 1) / (2.0 * 3) for c in range(2)]
    spectrum = np.abs(fft_radix2(np.pad(ds.signals["train"], ((0, 0), (0, 4096 - n)))))
    for i in range(ds.signals["train"].shape[0]):
        event = int(ds.labels["train"][i].argmax())
        peak_hz = spectrum[i, : 2048].argmax() * sr / 4096
        assert abs(peak_hz - freqs[event]) < 2 * sr / 4096


def test_gen_synthetic_validation():
    with pytest.raises(ValueError, match="at least 2"):
        gen_synthetic(1, 10)
    with pytest.raises(ValueError, match="snr"):
        gen_synthetic(2, 10, snr_db_range=(10.0, 0.0))


def test_dataset_roundtrip_bit_exact(tmp_path):
    ds = gen_synthetic(2, 10, seed=3, duration=0.25, n_test=4)
    ds.save(tmp_path / "ds")
    back = Dataset.load(tmp_path / "ds")
    for split in ds.signals:
        np.testing.assert_array_equal(ds.signals[split], back.signals[split])
        np.testing.assert_array_equal(ds.labels[split], back.labels[split])
    assert back.event_names == ds.event_names
    assert back.sample_rate == ds.sample_rate


def test_dataset_load_errors(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        Dataset.load(tmp_path)
    ds = gen_synthetic(2, 4, seed=0, duration=0.25, n_test=2)
    ds.save(tmp_path / "ds")
    csv = tmp_path / "ds" / "train.csv"
    lines = csv.read_text().splitlines()
    csv.write_text("\n".join(lines[:-1] + [lines[-1] + ",0.5"]) + "\n")
    with pytest.raises(DatasetError, match="fields"):
        Dataset.load(tmp_path / "ds")
    (tmp_path / "ds" / "manifest.json").write_text("{not json")
    with pytest.raises(DatasetError, match="JSON"):
        Dataset.load(tmp_path / "ds")


def test_dataset_validate_binary_labels():
    ds = gen_synthetic(2, 4, seed=0, duration=0.25, n_test=0)
    ds.labels["train"] = ds.labels["train"] * 3
    with pytest.raises(DatasetError, match="binary"):
        ds.validate()


# ---------------------------------------------------------------------------
# SMOTE
# ---------------------------------------------------------------------------


def two_positive_dataset():
    rng = np.random.default_rng(0)
    sig = rng.normal(size=(6, 16))
    lab = np.zeros((6, 2), dtype=np.int64)
    lab[:2, 0] = 1
    lab[2:, 1] = 1
    return Dataset("t", 100, ["a", "b"], {"train": sig}, {"train": lab})


def test_smote_two_positives_on_segment():
    ds = two_positive_dataset()
    out = smote_upsample(ds, 0, target_count=10, seed=5)
    p, q = ds.signals["train"][0], ds.signals["train"][1]
    new = out.signals["train"][6:]
    assert new.shape == (8, 16)
    for row in new:
        # row = p + u (q - p): recover u from one coordinate, check all agree
        d = q - p
        j = int(np.abs(d).argmax())
        u = (row[j] - p[j]) / d[j]
        assert 0.0 <= u < 1.0
        np.testing.assert_allclose(row, p + u * d, atol=1e-10)
    np.testing.assert_array_equal(out.labels["train"][6:, 0], np.ones(8, dtype=np.int64))
    np.testing.assert_array_equal(out.labels["train"][6:, 1], np.zeros(8, dtype=np.int64))


def test_smote_counts_and_bounding_box():
    rng = np.random.default_rng(1)
    sig = rng.normal(size=(30, 8))
    lab = np.zeros((30, 2), dtype=np.int64)
    lab[:10, 0] = 1
    lab[10:, 1] = 1
    ds = Dataset("t", 100, ["a", "b"], {"train": sig}, {"train": lab})
    out = smote_upsample(ds, 0, target_count=40, k=5, seed=2)
    new = out.signals["train"][30:]
    assert new.shape[0] == 30
    assert out.labels["train"][:, 0].sum() == 40
    pos = sig[:10]
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    assert (new >= lo - 1e-12).all() and (new <= hi + 1e-12).all()
    # untouched samples and feature dimensionality preserved
    np.testing.assert_array_equal(out.signals["train"][:30], sig)


def test_smote_errors_on_too_few_positives():
    ds = two_positive_dataset()
    ds.labels["train"][1, 0] = 0
    with pytest.raises(DatasetError, match="need >= 2"):
        smote_upsample(ds, 0, target_count=5)


def test_smote_deterministic():
    ds = two_positive_dataset()
    a = smote_upsample(ds, 1, target_count=9, seed=9)
    b = smote_upsample(ds, 1, target_count=9, seed=9)
    np.testing.assert_array_equal(a.signals["train"], b.signals["train"])


# ---------------------------------------------------------------------------
# corruption
# ---------------------------------------------------------------------------


def test_zero_mask_full_and_partial():
    sig = np.ones(100)
    np.testing.assert_array_equal(corrupt(sig, "zero_mask", 1.0, seed=0), np.zeros(100))
    out = corrupt(sig, "zero_mask", 0.25, seed=3)
    zeros = np.flatnonzero(out == 0)
    assert len(zeros) == 25
    assert np.array_equal(zeros, np.arange(zeros[0], zeros[0] + 25))  # contiguous window


def test_gaussian_sigma_zero_unchanged():
    sig = np.random.default_rng(0).normal(size=50)
    np.testing.assert_array_equal(corrupt(sig, "gaussian", 0.0, seed=1), sig)


def test_gaussian_half_normal_mean_oracle():
    # mean |perturbation| of N(0, sigma^2) is sigma * sqrt(2 / pi)
    sig = np.zeros(10_000)
    out = corrupt(sig, "gaussian", 0.03, seed=4)
    expected = 0.03 * np.sqrt(2.0 / np.pi)
    assert abs(np.abs(out).mean() - expected) / expected < 0.10


def test_corrupt_validation():
    with pytest.raises(ValueError, match="fraction"):
        corrupt(np.ones(10), "zero_mask", 1.5)
    with pytest.raises(ValueError, match="sigma"):
        corrupt(np.ones(10), "gaussian", -1.0)
    with pytest.raises(ValueError, match="unknown corruption"):
        corrupt(np.ones(10), "dropout", 0.5)
