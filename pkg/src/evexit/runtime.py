"""Uncertainty-thresholded early-exit inference.

A sample exits at the first stage whose head uncertainties satisfy the
policy (stage 2 always finalizes). Deeper stages are simply not computed,
so the MAC count in each trace is the cost actually spent.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evidential
from . import model as M
from .model import CascadeModel
from .quantize import QuantizedModel
from .tensor import Tensor, no_grad

__all__ = ["ExitPolicy", "InferenceTrace", "infer_with_exits", "traces_to_csv", "trace_summary"]

RULES = ("all_heads", "any_head", "per_head")


@dataclass(frozen=True)
class ExitPolicy:
    """Exit at stage s when the rule holds on its per-event uncertainties.

    all_heads: every event confident (max u <= tau); any_head: at least one
    (min u <= tau); per_head: each event finalizes independently at its first
    confident stage and the sample stops once all events are done.
    """

    tau: float
    rule: str = "all_heads"

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.rule not in RULES:
            raise ValueError(f"rule must be one of {RULES}, got {self.rule!r}")


@dataclass
class InferenceTrace:
    sample_id: int
    exit_stage: int
    yhat: np.ndarray  # (C,) 0/1 per event
    u: np.ndarray  # (C,)
    p: np.ndarray  # (C,)
    macs: int
    stage_records: list[dict] = field(default_factory=list)


def _check_weights(model) -> None:
    if isinstance(model, CascadeModel):
        for name, p in model.params.items():
            if not np.all(np.isfinite(p.data)):
                raise ValueError(f"model has non-finite weights in {name!r}")
    else:
        for name, b in model.biases.items():
            if not np.all(np.isfinite(b)):
                raise ValueError(f"model has non-finite bias in {name!r}")


def infer_with_exits(
    model: CascadeModel | QuantizedModel,
    xs: np.ndarray,
    policy: ExitPolicy,
    keep_stage_records: bool = False,
) -> list[InferenceTrace]:
    """Run a batch through the cascade with early exits; one trace per sample."""
    _check_weights(model)
    xs = np.asarray(xs, dtype=np.float32)
    if xs.ndim == 3:
        xs = xs[None]
    n = xs.shape[0]
    cfg = model.config
    c_events = cfg.n_events
    quantized = isinstance(model, QuantizedModel)
    feats = model.quantize_input(xs) if quantized else xs
    active = np.arange(n)
    traces: list[InferenceTrace | None] = [None] * n
    records: list[list[dict]] = [[] for _ in range(n)]
    # per_head bookkeeping: per sample, per event finalized outputs
    final_y = np.zeros((n, c_events), dtype=np.int64)
    final_u = np.full((n, c_events), np.nan)
    final_p = np.full((n, c_events), np.nan)
    done_events = np.zeros((n, c_events), dtype=bool)

    for stage in range(3):
        if len(active) == 0:
            break
        if quantized:
            out = model.stage_forward(feats, stage)
            new_feats = out.features.data
        else:
            with no_grad():
                out = model.stage_forward(Tensor(feats), stage)
            new_feats = out.features.data
        pred = out.prediction()
        u, p = pred["u"], pred["p"]
        yhat = pred["yhat"]
        macs = M.count_macs(cfg, stage, model.head_kind)
        if keep_stage_records:
            for row, sid in enumerate(active):
                records[sid].append(
                    {"stage": stage, "u": u[row].copy(), "p": p[row].copy(), "yhat": yhat[row].copy()}
                )
        if policy.rule == "per_head":
            for row, sid in enumerate(active):
                newly = (~done_events[sid]) & ((u[row] <= policy.tau) | (stage == 2))
                final_y[sid, newly] = yhat[row, newly]
                final_u[sid, newly] = u[row, newly]
                final_p[sid, newly] = p[row, newly]
                done_events[sid] |= newly
            finished = done_events[active].all(axis=1)
        elif policy.rule == "all_heads":
            finished = (u.max(axis=-1) <= policy.tau) | (stage == 2)
        else:  # any_head
            finished = (u.min(axis=-1) <= policy.tau) | (stage == 2)
        for row in np.flatnonzero(finished):
            sid = int(active[row])
            if policy.rule == "per_head":
                tr_y, tr_u, tr_p = final_y[sid], final_u[sid], final_p[sid]
            else:
                tr_y, tr_u, tr_p = yhat[row], u[row], p[row]
            traces[sid] = InferenceTrace(
                sample_id=sid,
                exit_stage=stage,
                yhat=np.asarray(tr_y, dtype=np.int64).copy(),
                u=np.asarray(tr_u, dtype=np.float64).copy(),
                p=np.asarray(tr_p, dtype=np.float64).copy(),
                macs=macs,
                stage_records=records[sid] if keep_stage_records else [],
            )
        keep = ~finished
        active = active[keep]
        feats = new_feats[keep]
    assert all(t is not None for t in traces)
    return traces  # type: ignore[return-value]


def traces_to_csv(traces: list[InferenceTrace], event_names: list[str], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["sample_id", "exit_stage", "macs"]
        for name in event_names:
            header += [f"y_{name}", f"u_{name}", f"p_{name}"]
        writer.writerow(header)
        for t in traces:
            row = [t.sample_id, t.exit_stage, t.macs]
            for c in range(len(event_names)):
                row += [int(t.yhat[c]), repr(float(t.u[c])), repr(float(t.p[c]))]
            writer.writerow(row)


def trace_summary(traces: list[InferenceTrace]) -> dict:
    n = len(traces)
    counts = [0, 0, 0]
    for t in traces:
        counts[t.exit_stage] += 1
    return {
        "n_samples": n,
        "exit_counts": {M.DEPTH_NAMES[s]: counts[s] for s in range(3)},
        "exit_rates": {M.DEPTH_NAMES[s]: counts[s] / n for s in range(3)},
        "mean_macs": float(np.mean([t.macs for t in traces])),
    }


def write_trace_outputs(
    traces: list[InferenceTrace], event_names: list[str], out_dir: str | Path
) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    traces_to_csv(traces, event_names, out_dir / "trace.csv")
    with open(out_dir / "trace_summary.json", "w") as fh:
        json.dump(trace_summary(traces), fh, indent=2, sort_keys=True)
        fh.write("\n")
