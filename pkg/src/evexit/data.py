"""Event datasets: synthetic generation, SMOTE upsampling, corruption, disk I/O.

On disk a dataset is a JSON manifest plus one CSV per split. A CSV row is
the split-relative id, the C label bits, then the raw signal values written
with shortest round-trip float repr so reloads are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["Dataset", "DatasetError", "gen_synthetic", "smote_upsample", "corrupt"]

MANIFEST_NAME = "manifest.json"


class DatasetError(ValueError):
    """Malformed dataset contents or manifest."""


@dataclass
class Dataset:
    """Fixed-length signals with C-length binary label vectors per split."""

    name: str
    sample_rate: int
    event_names: list[str]
    signals: dict[str, np.ndarray] = field(default_factory=dict)  # split -> (n, len)
    labels: dict[str, np.ndarray] = field(default_factory=dict)  # split -> (n, C)

    @property
    def n_events(self) -> int:
        return len(self.event_names)

    @property
    def signal_len(self) -> int:
        for sig in self.signals.values():
            return sig.shape[1]
        raise DatasetError("dataset has no splits")

    def validate(self) -> None:
        if not self.signals:
            raise DatasetError("dataset has no splits")
        length = self.signal_len
        for split, sig in self.signals.items():
            lab = self.labels.get(split)
            if lab is None or lab.shape[0] != sig.shape[0]:
                raise DatasetError(f"split {split!r}: labels do not match signals")
            if sig.shape[1] != length:
                raise DatasetError(f"split {split!r}: signal length {sig.shape[1]} != {length}")
            if lab.shape[1] != self.n_events:
                raise DatasetError(
                    f"split {split!r}: label width {lab.shape[1]} != {self.n_events} events"
                )
            if not np.isin(lab, (0, 1)).all():
                raise DatasetError(f"split {split!r}: labels must be binary")

    def binary_labels(self, split: str, event_index: int) -> np.ndarray:
        """One-vs-all view: the event column as a 0/1 vector."""
        return self.labels[split][:, event_index].astype(np.int64)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "name": self.name,
            "sample_rate": self.sample_rate,
            "events": self.event_names,
            "signal_len": self.signal_len,
            "splits": {split: f"{split}.csv" for split in sorted(self.signals)},
        }
        with open(directory / MANIFEST_NAME, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        for split in sorted(self.signals):
            sig, lab = self.signals[split], self.labels[split]
            with open(directory / f"{split}.csv", "w") as fh:
                for i in range(sig.shape[0]):
                    bits = ",".join(str(int(b)) for b in lab[i])
                    vals = ",".join(repr(float(v)) for v in sig[i])
                    fh.write(f"{i},{bits},{vals}\n")

    @classmethod
    def load(cls, directory: str | Path) -> "Dataset":
        directory = Path(directory)
        path = directory / MANIFEST_NAME
        if not path.exists():
            raise DatasetError(f"no manifest at {path}")
        try:
            manifest = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DatasetError(f"manifest is not valid JSON: {exc}") from exc
        for key in ("name", "sample_rate", "events", "signal_len", "splits"):
            if key not in manifest:
                raise DatasetError(f"manifest missing key {key!r}")
        n_events = len(manifest["events"])
        sig_len = int(manifest["signal_len"])
        ds = cls(
            name=manifest["name"],
            sample_rate=int(manifest["sample_rate"]),
            event_names=list(manifest["events"]),
        )
        for split, fname in manifest["splits"].items():
            rows_sig, rows_lab = [], []
            for ln, line in enumerate((directory / fname).read_text().splitlines()):
                parts = line.split(",")
                if len(parts) != 1 + n_events + sig_len:
                    raise DatasetError(f"{fname}:{ln + 1}: expected {1 + n_events + sig_len} fields")
                rows_lab.append([int(v) for v in parts[1 : 1 + n_events]])
                rows_sig.append([float(v) for v in parts[1 + n_events :]])
            ds.signals[split] = np.asarray(rows_sig, dtype=np.float64)
            ds.labels[split] = np.asarray(rows_lab, dtype=np.int64)
        ds.validate()
        return ds


def gen_synthetic(
    n_events: int,
    n_per_event: int,
    snr_db_range: tuple[float, float] = (-10.0, 20.0),
    seed: int = 0,
    sample_rate: int = 4000,
    duration: float = 1.0,
    n_test: int | None = None,
    name: str = "synthetic",
) -> Dataset:
    """Sinusoid tones at per-event frequencies plus white noise.

    Each event gets a distinct frequency below Nyquist; per-sample SNR is
    drawn uniformly from snr_db_range, so high-SNR samples are easy and
    low-SNR ones hard. The default range reaches well below 0 dB so trained
    models meet heavy noise inside the training distribution and respond
    with low evidence rather than extrapolated confidence. Train gets
    n_per_event samples per event; the test split gets n_test samples total
    (default n_per_event * C // 3), dealt round-robin over events.
    Deterministic under seed.
    """
    if n_events < 2:
        raise ValueError(f"need at least 2 events, got {n_events}")
    lo, hi = snr_db_range
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
        raise ValueError(f"invalid snr range {snr_db_range}")
    if n_test is None:
        n_test = n_per_event * n_events // 3
    freqs = [sample_rate * (c + 1) / (2.0 * (n_events + 1)) for c in range(n_events)]
    if max(freqs) >= sample_rate / 2:
        raise ValueError(f"event frequency {max(freqs)} Hz at or above Nyquist")
    rng = np.random.default_rng(seed)
    n_samples = int(round(sample_rate * duration))
    t = np.arange(n_samples) / sample_rate

    def make(event: int) -> np.ndarray:
        phase = rng.uniform(0, 2 * np.pi)
        tone = np.sin(2 * np.pi * freqs[event] * t + phase)
        snr_db = rng.uniform(lo, hi)
        noise_std = (1.0 / np.sqrt(2.0)) / (10.0 ** (snr_db / 20.0))
        return tone + rng.normal(0.0, noise_std, size=n_samples)

    ds = Dataset(
        name=name,
        sample_rate=sample_rate,
        event_names=[f"event_{c}" for c in range(n_events)],
    )
    train_sig, train_lab = [], []
    for c in range(n_events):
        for _ in range(n_per_event):
            train_sig.append(make(c))
            row = np.zeros(n_events, dtype=np.int64)
            row[c] = 1
            train_lab.append(row)
    test_sig, test_lab = [], []
    for i in range(n_test):
        c = i % n_events
        test_sig.append(make(c))
        row = np.zeros(n_events, dtype=np.int64)
        row[c] = 1
        test_lab.append(row)
    ds.signals["train"] = np.asarray(train_sig)
    ds.labels["train"] = np.asarray(train_lab)
    if n_test:
        ds.signals["test"] = np.asarray(test_sig)
        ds.labels["test"] = np.asarray(test_lab)
    ds.validate()
    return ds


def smote_upsample(
    dataset: Dataset,
    event_index: int,
    target_count: int,
    k: int = 5,
    seed: int = 0,
    split: str = "train",
) -> Dataset:
    """SMOTE in signal space: new = x + u * (nn - x), u ~ U[0, 1).

    Interpolates between a minority positive and one of its k nearest
    positive neighbours (Euclidean); k is capped at positives - 1. Returns
    a new dataset whose split has exactly target_count positives for the
    event; other samples are untouched.
    """
    sig = dataset.signals[split]
    lab = dataset.labels[split]
    pos_idx = np.flatnonzero(lab[:, event_index] == 1)
    n_pos = len(pos_idx)
    if n_pos < 2:
        raise DatasetError(
            f"event {event_index}: {n_pos} positive sample(s), need >= 2 to interpolate"
        )
    n_new = target_count - n_pos
    if n_new < 0:
        raise ValueError(f"target_count {target_count} below existing positives {n_pos}")
    k = min(k, n_pos - 1)
    pos = sig[pos_idx]
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
    rng = np.random.default_rng(seed)
    new_sig = np.empty((n_new, sig.shape[1]))
    for i in range(n_new):
        base = rng.integers(0, n_pos)
        pick = nn[base][rng.integers(0, k)]
        u = rng.uniform(0.0, 1.0)
        new_sig[i] = pos[base] + u * (pos[pick] - pos[base])
    new_lab = np.zeros((n_new, dataset.n_events), dtype=np.int64)
    new_lab[:, event_index] = 1
    out = Dataset(
        name=dataset.name,
        sample_rate=dataset.sample_rate,
        event_names=list(dataset.event_names),
        signals=dict(dataset.signals),
        labels=dict(dataset.labels),
    )
    out.signals[split] = np.concatenate([sig, new_sig])
    out.labels[split] = np.concatenate([lab, new_lab])
    out.validate()
    return out


def corrupt(signal: np.ndarray, mode: str, param: float, seed: int = 0) -> np.ndarray:
    """Inject a signal fault: a zeroed contiguous window or additive noise.

    zero_mask: param is the zeroed fraction in [0, 1], window start random.
    gaussian: param is the noise sigma >= 0.
    """
    signal = np.asarray(signal, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if mode == "zero_mask":
        if not 0.0 <= param <= 1.0:
            raise ValueError(f"zero_mask fraction must be in [0, 1], got {param}")
        n = signal.shape[-1]
        win = int(round(param * n))
        out = signal.copy()
        if win > 0:
            start = int(rng.integers(0, n - win + 1))
            out[..., start : start + win] = 0.0
        return out
    if mode == "gaussian":
        if param < 0:
            raise ValueError(f"gaussian sigma must be >= 0, got {param}")
        return signal + rng.normal(0.0, param, size=signal.shape)
    raise ValueError(f"unknown corruption mode {mode!r}")
