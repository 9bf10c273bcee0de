"""Parameter and activation memory accounting.

param_bytes plays the role of persistent flash-style storage, and
peak_activation_bytes the working-RAM peak, computed by liveness over the
sequential layer graph: a tensor is live from production until its last
consumer has run. ReLU is modelled in place; convolutions, pooling and
heads produce fresh buffers. Interpreter and OS overheads are out of scope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import model as M
from .model import CascadeModel
from .quantize import QuantizedModel

__all__ = ["CostReport", "estimate_memory"]


@dataclass(frozen=True)
class CostReport:
    param_bytes: int
    weight_bytes: int
    bias_bytes: int
    quant_metadata_bytes: int
    peak_activation_bytes: int
    macs: dict[str, int]  # per exit depth

    def to_dict(self) -> dict:
        return {
            "param_bytes": self.param_bytes,
            "weight_bytes": self.weight_bytes,
            "bias_bytes": self.bias_bytes,
            "quant_metadata_bytes": self.quant_metadata_bytes,
            "peak_activation_bytes": self.peak_activation_bytes,
            "macs": dict(self.macs),
        }


def _activation_steps(cfg, head_kind: str, act_width: int) -> list[tuple[str, int, list[str]]]:
    """(tensor, nbytes, consumed tensors) per production step, in execution order."""
    _, h, w = cfg.input_shape
    convs = [spec for spec in M.backbone_layers(cfg) if spec.kind == "conv"]
    last_conv_of_stage = {}
    for spec in convs:
        last_conv_of_stage[spec.stage] = spec.name
    steps: list[tuple[str, int, list[str]]] = []
    prev = "input"

    def head_steps(stage: int, fm: str) -> None:
        steps.append((f"pooled.{stage}", cfg.channels * act_width, [fm]))
        steps.append((f"logits.{stage}", cfg.n_events * 2 * act_width, [f"pooled.{stage}"]))

    for spec in convs:
        steps.append((spec.name, spec.out_ch * h * w * act_width, [prev]))
        prev = spec.name
        # the stem anchors stage 0, so every stage has a last conv
        if head_kind == "beta" and last_conv_of_stage[spec.stage] == spec.name:
            head_steps(spec.stage, prev)
    if head_kind == "softmax":
        steps.append(("pooled", cfg.channels * act_width, [prev]))
        steps.append(("probs", cfg.n_events * act_width, ["pooled"]))
    return steps


def _liveness_peak(input_bytes: int, steps: list[tuple[str, int, list[str]]]) -> int:
    last_use: dict[str, int] = {}
    for i, (_, _, inputs) in enumerate(steps):
        for t in inputs:
            last_use[t] = i
    live: dict[str, int] = {"input": input_bytes}
    peak = input_bytes
    for i, (name, nbytes, _inputs) in enumerate(steps):
        live[name] = nbytes
        peak = max(peak, sum(live.values()))
        for t in list(live):
            if t != name and last_use.get(t, -1) <= i:
                del live[t]
    return peak


def estimate_memory(model: CascadeModel | QuantizedModel, input_shape=None) -> CostReport:
    if isinstance(model, QuantizedModel):
        cfg, head_kind = model.config, model.head_kind
        weight_bytes = sum(q.size for q in model.qweights.values())  # int8
        bias_bytes = sum(b.size * 4 for b in model.biases.values())
        # one f32 scale per weight tensor; f32 scale + i8 zero point per activation point
        quant_meta = 4 * len(model.wscales) + 5 * len(model.act_calib)
        act_width = 1
    else:
        cfg, head_kind = model.config, model.head_kind
        itemsize = np.dtype(model.dtype).itemsize
        weight_bytes = sum(
            p.size * itemsize for n, p in model.params.items() if n.endswith(".w")
        )
        bias_bytes = sum(
            p.size * itemsize for n, p in model.params.items() if n.endswith(".b")
        )
        quant_meta = 0
        act_width = itemsize
    if input_shape is None:
        input_shape = cfg.input_shape
    input_bytes = int(math.prod(input_shape)) * act_width
    steps = _activation_steps(cfg, head_kind, act_width)
    peak = _liveness_peak(input_bytes, steps)
    macs = {name: M.count_macs(cfg, name, head_kind) for name in M.DEPTH_NAMES}
    if head_kind == "softmax":
        macs = {"deep": M.count_macs(cfg, "deep", "softmax")}
    return CostReport(
        param_bytes=weight_bytes + bias_bytes,
        weight_bytes=weight_bytes,
        bias_bytes=bias_bytes,
        quant_metadata_bytes=quant_meta,
        peak_activation_bytes=peak,
        macs=macs,
    )
