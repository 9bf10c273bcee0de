"""Calibration metrics, system-level evaluation, robustness and exit profiling.

Pooled metrics treat each sample as a single-label C-way decision: the
cascade's per-event Beta means are normalized into a probability vector, the
softmax baselines provide one directly. Brier uses the sum-over-classes
convention (a maximally wrong binary prediction scores 2), NLL clamps the
target probability, and ECE uses 10 equal-width bins on max-probability
confidence. Per-event binary breakdowns come from the (p_c, 1 - p_c) pairs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import features as F
from .data import Dataset, corrupt
from .model import CascadeModel
from .quantize import QuantizedModel
from .runtime import ExitPolicy, InferenceTrace, infer_with_exits
from .tensor import Tensor, no_grad
from .training import BaselineBundle

__all__ = [
    "CalibrationReport",
    "EvalResult",
    "RobustnessReport",
    "metrics",
    "evaluate_system",
    "robustness_eval",
    "exit_profile",
    "write_profile",
]

EVAL_KINDS = ("cascade", "softmax_single", "deep_ensemble", "input_aug")
_NLL_EPS = 1e-12


@dataclass(frozen=True)
class CalibrationReport:
    accuracy: float
    brier: float
    nll: float
    ece: float
    n: int
    per_event: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "brier": self.brier,
            "nll": self.nll,
            "ece": self.ece,
            "n": self.n,
            "per_event": [dict(d) for d in self.per_event],
        }


def _ece(conf: np.ndarray, correct: np.ndarray, n_bins: int = 10) -> float:
    bins = np.clip((conf * n_bins).astype(int), 0, n_bins - 1)
    total = len(conf)
    ece = 0.0
    for b in range(n_bins):
        mask = bins == b
        if not mask.any():
            continue
        ece += (mask.sum() / total) * abs(correct[mask].mean() - conf[mask].mean())
    return float(ece)


def metrics(probs: np.ndarray, labels: np.ndarray, event_names: list[str] | None = None) -> CalibrationReport:
    """Pooled multiclass report plus per-event binary breakdowns.

    probs: (N, C) rows summing to 1; labels: (N,) class indices or (N, C)
    one-hot/binary. Binary per-event rows use probs[:, c] against the
    event's 0/1 label column.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2:
        raise ValueError(f"probs must be (N, C), got shape {probs.shape}")
    n, c = probs.shape
    if labels.ndim == 1:
        if labels.shape[0] != n:
            raise ValueError(f"{labels.shape[0]} labels for {n} probability rows")
        onehot = np.zeros((n, c))
        onehot[np.arange(n), labels] = 1.0
        idx = labels.astype(int)
    else:
        if labels.shape != (n, c):
            raise ValueError(f"labels shape {labels.shape} does not match probs {probs.shape}")
        onehot = labels.astype(np.float64)
        idx = labels.argmax(axis=1)
    if np.any(probs < 0) or np.any(probs > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    pred = probs.argmax(axis=1)
    correct = (pred == idx).astype(np.float64)
    accuracy = float(correct.mean())
    brier = float(((probs - onehot) ** 2).sum(axis=1).mean())
    nll = float(-np.log(np.maximum(probs[np.arange(n), idx], _NLL_EPS)).mean())
    ece = _ece(probs.max(axis=1), correct)
    per_event = []
    names = event_names or [f"event_{i}" for i in range(c)]
    for ci in range(c):
        p = probs[:, ci]
        y = onehot[:, ci]
        yhat = (p >= 0.5).astype(np.float64)
        ok = (yhat == y).astype(np.float64)
        per_event.append(
            {
                "event": names[ci],
                "accuracy": float(ok.mean()),
                "brier": float(2.0 * ((p - y) ** 2).mean()),
                "nll": float(-np.log(np.maximum(np.where(y == 1, p, 1 - p), _NLL_EPS)).mean()),
                "ece": _ece(np.maximum(p, 1 - p), ok),
            }
        )
    return CalibrationReport(accuracy=accuracy, brier=brier, nll=nll, ece=ece, n=n, per_event=per_event)


@dataclass
class EvalResult:
    kind: str
    report: CalibrationReport
    probs: np.ndarray  # (N, C) pooled
    uncertainty: np.ndarray  # (N,) of the predicted event / 1 - max prob
    predicted: np.ndarray  # (N,) class index
    per_event_u: np.ndarray | None = None  # (N, C) for the cascade
    traces: list[InferenceTrace] | None = None
    mean_macs: float | None = None


def _normalize_rows(p: np.ndarray) -> np.ndarray:
    s = p.sum(axis=1, keepdims=True)
    s[s == 0] = 1.0
    return p / s


def _softmax_probs(model: CascadeModel | QuantizedModel, feats: np.ndarray) -> np.ndarray:
    if isinstance(model, QuantizedModel):
        return model.forward_softmax(feats)
    with no_grad():
        return model.forward_softmax(Tensor(feats)).data.astype(np.float64)


def evaluate_system(
    kind: str,
    bundle,
    dataset: Dataset,
    feature_cfg: F.FeatureConfig,
    split: str = "test",
    policy: ExitPolicy | None = None,
    seed: int = 0,
    features: np.ndarray | None = None,
) -> EvalResult:
    """Evaluate any of the four systems on one dataset split.

    cascade: early-exit evidential inference under the policy; probabilities
    are the normalized per-event Beta means at the exit taken.
    softmax_single: plain softmax probabilities. deep_ensemble: mean member
    probabilities. input_aug: mean probabilities over jittered signal copies
    (deterministic under seed). Baseline uncertainty is 1 - max probability.
    """
    if kind not in EVAL_KINDS:
        raise ValueError(f"kind must be one of {EVAL_KINDS}, got {kind!r}")
    signals = dataset.signals[split]
    labels = dataset.labels[split]
    if features is None and kind != "input_aug":
        features = F.extract_mfcc_batch(signals, feature_cfg)

    if kind == "cascade":
        model = bundle
        if not isinstance(model, (CascadeModel, QuantizedModel)) or model.head_kind != "beta":
            raise ValueError("cascade evaluation needs an evidence-head model")
        policy = policy or ExitPolicy(tau=0.0)
        traces = infer_with_exits(model, features, policy)
        p_event = np.stack([t.p for t in traces])
        u_event = np.stack([t.u for t in traces])
        probs = _normalize_rows(p_event)
        predicted = p_event.argmax(axis=1)
        uncertainty = u_event[np.arange(len(traces)), predicted]
        report = metrics(probs, labels, dataset.event_names)
        return EvalResult(
            kind=kind,
            report=report,
            probs=probs,
            uncertainty=uncertainty,
            predicted=predicted,
            per_event_u=u_event,
            traces=traces,
            mean_macs=float(np.mean([t.macs for t in traces])),
        )

    models = bundle.models if isinstance(bundle, BaselineBundle) else [bundle]
    for m in models:
        if m.head_kind != "softmax":
            raise ValueError(f"{kind} evaluation needs softmax-head models")
    if kind == "softmax_single":
        if len(models) != 1:
            raise ValueError("softmax_single expects exactly one model")
        probs = _softmax_probs(models[0], features)
    elif kind == "deep_ensemble":
        if len(models) < 2:
            raise ValueError("deep_ensemble expects multiple models")
        probs = np.mean([_softmax_probs(m, features) for m in models], axis=0)
    else:  # input_aug
        if len(models) != 1:
            raise ValueError("input_aug expects exactly one model")
        aug = (isinstance(bundle, BaselineBundle) and bundle.augment) or models[0].extras.get("augment")
        if not aug:
            raise ValueError("input_aug bundle is missing its augment configuration")
        sigma, n_copies = float(aug["sigma"]), int(aug["n_copies"])
        acc_probs = []
        for copy_i in range(n_copies):
            rng = np.random.default_rng([seed, copy_i])
            jittered = signals + rng.normal(0.0, sigma, size=signals.shape) if sigma > 0 else signals
            feats_i = F.extract_mfcc_batch(jittered, feature_cfg)
            acc_probs.append(_softmax_probs(models[0], feats_i))
        probs = np.mean(acc_probs, axis=0)
    predicted = probs.argmax(axis=1)
    uncertainty = 1.0 - probs.max(axis=1)
    report = metrics(probs, labels, dataset.event_names)
    return EvalResult(
        kind=kind,
        report=report,
        probs=probs,
        uncertainty=uncertainty,
        predicted=predicted,
    )


@dataclass
class RobustnessReport:
    levels: list[dict]

    def to_dict(self) -> dict:
        return {"levels": [dict(d) for d in self.levels]}


def robustness_eval(
    kind: str,
    bundle,
    dataset: Dataset,
    feature_cfg: F.FeatureConfig,
    grid: list[tuple[str, float]],
    split: str = "test",
    policy: ExitPolicy | None = None,
    seed: int = 0,
) -> RobustnessReport:
    """Corrupt signals before feature extraction and re-evaluate per level.

    The grid's first entry must be the clean level ("none" or param 0).
    Reports accuracy, mean uncertainty split by correctness, and prediction
    flips against the clean level.
    """
    if not grid:
        raise ValueError("empty corruption grid")
    mode0, param0 = grid[0]
    if mode0 != "none" and param0 != 0:
        raise ValueError("first grid entry must be the clean level")
    labels_idx = dataset.labels[split].argmax(axis=1)
    signals = dataset.signals[split]
    clean_pred: np.ndarray | None = None
    levels = []
    for li, (mode, param) in enumerate(grid):
        if mode == "none" or param == 0:
            sigs = signals
        else:
            sigs = np.stack(
                [corrupt(signals[i], mode, param, seed=[seed, li, i]) for i in range(len(signals))]
            )
        ds_level = Dataset(
            name=dataset.name,
            sample_rate=dataset.sample_rate,
            event_names=list(dataset.event_names),
            signals={split: sigs},
            labels={split: dataset.labels[split]},
        )
        res = evaluate_system(kind, bundle, ds_level, feature_cfg, split=split, policy=policy, seed=seed)
        correct = res.predicted == labels_idx
        if clean_pred is None:
            clean_pred = res.predicted
        row = {
            "mode": mode,
            "param": float(param),
            "accuracy": res.report.accuracy,
            "nll": res.report.nll,
            "mean_uncertainty": float(res.uncertainty.mean()),
            "mean_uncertainty_correct": float(res.uncertainty[correct].mean()) if correct.any() else None,
            "mean_uncertainty_incorrect": float(res.uncertainty[~correct].mean()) if (~correct).any() else None,
            "flips_vs_clean": int((res.predicted != clean_pred).sum()),
            "n": int(len(labels_idx)),
        }
        levels.append(row)
    return RobustnessReport(levels=levels)


def exit_profile(
    model: CascadeModel | QuantizedModel,
    features: np.ndarray,
    labels: np.ndarray,
    taus: list[float],
    rule: str = "all_heads",
) -> list[dict]:
    """One early-exit evaluation per threshold; rows ready for CSV/JSON."""
    labels_idx = np.asarray(labels).argmax(axis=1)
    rows = []
    for tau in taus:
        traces = infer_with_exits(model, features, ExitPolicy(tau=tau, rule=rule))
        p_event = np.stack([t.p for t in traces])
        probs = _normalize_rows(p_event)
        rep = metrics(probs, np.asarray(labels))
        counts = np.bincount([t.exit_stage for t in traces], minlength=3)
        n = len(traces)
        rows.append(
            {
                "tau": float(tau),
                "exit_rate_shallow": counts[0] / n,
                "exit_rate_medium": counts[1] / n,
                "exit_rate_deep": counts[2] / n,
                "mean_macs": float(np.mean([t.macs for t in traces])),
                "accuracy": float((p_event.argmax(axis=1) == labels_idx).mean()),
                "nll": rep.nll,
            }
        )
    return rows


def write_profile(rows: list[dict], out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = ["tau", "exit_rate_shallow", "exit_rate_medium", "exit_rate_deep", "mean_macs", "accuracy", "nll"]
    with open(out_dir / "profile.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for r in rows:
            writer.writerow([repr(float(r[c])) for c in cols])
    with open(out_dir / "profile.json", "w") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")
