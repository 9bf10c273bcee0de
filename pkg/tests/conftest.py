import numpy as np
import pytest

from evexit.data import gen_synthetic
from evexit.evidential import LossConfig
from evexit.features import FeatureConfig, extract_mfcc_batch
from evexit.model import BackboneConfig, build_model
from evexit.training import Hyper, cascade_train


def finite_diff(param_data: np.ndarray, f, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. an array mutated in place."""
    grad = np.zeros_like(param_data)
    flat = param_data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Vector-relative error: worst absolute gap over the dominant magnitude.

    Elementwise ratios blow up on near-zero components where central
    differences sit at the float64 noise floor, so the comparison is scaled
    by the largest gradient entry instead.
    """
    scale = max(floor, float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)))
    return float(np.abs(np.asarray(a) - np.asarray(b)).max() / scale)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Two-event synthetic set, small enough to train in seconds."""
    return gen_synthetic(
        n_events=2, n_per_event=48, snr_db_range=(5.0, 25.0), seed=11, duration=0.5, n_test=32
    )


@pytest.fixture(scope="session")
def tiny_features(tiny_dataset):
    cfg = FeatureConfig()
    train = extract_mfcc_batch(tiny_dataset.signals["train"], cfg)
    test = extract_mfcc_batch(tiny_dataset.signals["test"], cfg)
    return cfg, train, test


@pytest.fixture(scope="session")
def trained_tiny_model(tiny_dataset, tiny_features):
    """A small trained cascade shared by runtime/metrics/quantization tests."""
    _, train_feats, _ = tiny_features
    cfg = BackboneConfig(
        channels=8,
        blocks=3,
        input_shape=train_feats.shape[-3:],
        n_events=tiny_dataset.n_events,
        allow_custom=True,
    )
    model = build_model(cfg, seed=3)
    cascade_train(
        model,
        train_feats,
        tiny_dataset.labels["train"],
        Hyper(epochs=12, seed=3),
        LossConfig(),
    )
    return model
