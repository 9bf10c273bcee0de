"""Int8 post-training quantization as a fake-quant simulator.

Weights are per-tensor symmetric (zero_point 0, scale max|w|/127); activations
are per-tensor affine with (scale, zero_point) calibrated from min/max over a
calibration set. Inference dequantizes around every conv/linear with float32
accumulation, which is accuracy-faithful but makes no speed claims.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as T
from .model import BackboneConfig, CascadeModel, StageOutput
from .tensor import Tensor

__all__ = [
    "QuantizedModel",
    "quantize_model",
    "quantized_forward",
    "round_half_away",
    "quantize_weight",
]


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round halves away from zero (0.5 -> 1, -0.5 -> -1); np.round is half-even."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_weight(w: np.ndarray) -> tuple[np.ndarray, float]:
    """Symmetric per-tensor int8: scale = max|w| / 127, or 1 for all-zero."""
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    scale = peak / 127.0 if peak > 0 else 1.0
    q = np.clip(round_half_away(w / scale), -128, 127).astype(np.int8)
    return q, scale


def _calibrate_affine(mn: float, mx: float) -> tuple[float, int]:
    if not np.isfinite(mn) or not np.isfinite(mx) or mx <= mn:
        return 1.0, 0
    scale = (mx - mn) / 255.0
    zp = int(np.clip(round_half_away(-128.0 - mn / scale), -128, 127))
    return scale, zp


def _fake_quant(x: np.ndarray, scale: float, zp: int) -> np.ndarray:
    q = np.clip(round_half_away(x / scale) + zp, -128, 127)
    return ((q - zp) * scale).astype(np.float32)


@dataclass
class QuantizedModel:
    """Int8 weights plus activation calibration; biases stay float32."""

    config: BackboneConfig
    head_kind: str
    qweights: dict[str, np.ndarray]  # int8
    wscales: dict[str, float]
    biases: dict[str, np.ndarray]  # float32
    act_calib: dict[str, tuple[float, int]]  # point -> (scale, zero_point)
    extras: dict = field(default_factory=dict)

    def dequant_weight(self, name: str) -> np.ndarray:
        return (self.qweights[name].astype(np.float32)) * np.float32(self.wscales[name])

    def _fq(self, point: str, x: np.ndarray) -> np.ndarray:
        scale, zp = self.act_calib[point]
        return _fake_quant(x, scale, zp)

    def quantize_input(self, x: np.ndarray) -> np.ndarray:
        return self._fq("input", np.asarray(x, dtype=np.float32))

    def stage_forward(self, feats: np.ndarray, stage: int) -> StageOutput:
        """Mirror of the float stage walk with fake-quant after every layer."""
        for spec in M.backbone_layers(self.config):
            if spec.stage != stage:
                continue
            if spec.kind == "relu":
                feats = self._fq(spec.name, np.maximum(feats, 0.0))
                continue
            with T.no_grad():
                out = T.conv2d(
                    Tensor(feats),
                    Tensor(self.dequant_weight(f"{spec.name}.w")),
                    Tensor(self.biases[f"{spec.name}.b"]),
                    groups=spec.groups,
                    padding="same",
                ).data
            feats = self._fq(spec.name, out)
        pooled = self._fq(f"heads.{stage}.pooled", feats.mean(axis=(-2, -1)))
        per_event = []
        for c in range(self.config.n_events):
            w = self.dequant_weight(f"heads.{stage}.{c}.w")
            z = pooled @ w.T + self.biases[f"heads.{stage}.{c}.b"]
            per_event.append(self._fq(f"heads.{stage}.{c}", z))
        logits = np.stack(per_event, axis=-2)
        return StageOutput(stage=stage, features=Tensor(feats), logits=Tensor(logits))

    def forward(self, x, depth: str | int = "deep") -> list[StageOutput]:
        max_stage = M._depth_index(depth)
        feats = self.quantize_input(np.asarray(x, dtype=np.float32))
        outputs = []
        for stage in range(max_stage + 1):
            out = self.stage_forward(feats, stage)
            feats = out.features.data
            outputs.append(out)
        return outputs

    def forward_softmax(self, x) -> np.ndarray:
        if self.head_kind != "softmax":
            raise ValueError("forward_softmax() needs a softmax-head model")
        feats = self.quantize_input(np.asarray(x, dtype=np.float32))
        for spec in M.backbone_layers(self.config):
            if spec.kind == "relu":
                feats = self._fq(spec.name, np.maximum(feats, 0.0))
                continue
            with T.no_grad():
                feats = self._fq(
                    spec.name,
                    T.conv2d(
                        Tensor(feats),
                        Tensor(self.dequant_weight(f"{spec.name}.w")),
                        Tensor(self.biases[f"{spec.name}.b"]),
                        groups=spec.groups,
                        padding="same",
                    ).data,
                )
        pooled = self._fq("head.pooled", feats.mean(axis=(-2, -1)))
        z = self._fq("head", pooled @ self.dequant_weight("head.w").T + self.biases["head.b"])
        shifted = z - z.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    def serialize(self) -> bytes:
        table = []
        blob = bytearray()
        entries = [(n, q) for n, q in sorted(self.qweights.items())]
        entries += [(n, b) for n, b in sorted(self.biases.items())]
        for name, arr in entries:
            arr = np.ascontiguousarray(arr)
            raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
            table.append(
                {
                    "name": name,
                    "shape": list(arr.shape),
                    "dtype": M._DTYPE_NAMES[arr.dtype],
                    "offset": len(blob),
                    "nbytes": len(raw),
                }
            )
            blob += raw
        header = {
            "format_version": M.FORMAT_VERSION,
            "head_kind": self.head_kind,
            "config": self.config.to_dict(),
            "tensors": table,
            "quant": {
                "weights": {n: {"scale": s, "zero_point": 0} for n, s in sorted(self.wscales.items())},
                "activations": {
                    p: {"scale": sc, "zero_point": zp} for p, (sc, zp) in sorted(self.act_calib.items())
                },
            },
            "extras": dict(self.extras),
        }
        hdr = json.dumps(header, sort_keys=True).encode()
        return M._MAGIC + struct.pack("<I", len(hdr)) + hdr + bytes(blob)


def quantized_from_parts(header: dict, tensors: dict[str, np.ndarray]) -> QuantizedModel:
    quant = header["quant"]
    qweights, biases = {}, {}
    for name, arr in tensors.items():
        if arr.dtype == np.int8:
            qweights[name] = arr
        else:
            biases[name] = arr.astype(np.float32)
    for name in quant["weights"]:
        if name not in qweights:
            raise M.TensorSpecError(f"quant metadata names missing tensor {name!r}")
    return QuantizedModel(
        config=BackboneConfig.from_dict(header["config"]),
        head_kind=header["head_kind"],
        qweights=qweights,
        wscales={n: float(v["scale"]) for n, v in quant["weights"].items()},
        biases=biases,
        act_calib={p: (float(v["scale"]), int(v["zero_point"])) for p, v in quant["activations"].items()},
        extras=dict(header.get("extras", {})),
    )


def _observation_points(cfg: BackboneConfig, head_kind: str) -> list[str]:
    points = ["input"]
    points += [spec.name for spec in M.backbone_layers(cfg)]
    if head_kind == "beta":
        for stage in range(3):
            points.append(f"heads.{stage}.pooled")
            points += [f"heads.{stage}.{c}" for c in range(cfg.n_events)]
    else:
        points += ["head.pooled", "head"]
    return points


def quantize_model(model: CascadeModel, calibration: np.ndarray) -> QuantizedModel:
    """Quantize weights and calibrate activations over a batch of inputs."""
    calibration = np.asarray(calibration, dtype=np.float32)
    if calibration.ndim == 3:
        calibration = calibration[None]
    if calibration.shape[0] == 0:
        raise ValueError("calibration set is empty")
    cfg = model.config
    ranges: dict[str, tuple[float, float]] = {}

    def observe(point: str, x: np.ndarray) -> None:
        mn, mx = float(x.min()), float(x.max())
        if point in ranges:
            omn, omx = ranges[point]
            ranges[point] = (min(mn, omn), max(mx, omx))
        else:
            ranges[point] = (mn, mx)

    observe("input", calibration)
    stage_ends = _stage_end_layers(cfg)
    with T.no_grad():
        feats = Tensor(calibration)
        for spec in M.backbone_layers(cfg):
            if spec.kind == "relu":
                feats = T.relu(feats)
            else:
                feats = T.conv2d(
                    feats,
                    model.params[f"{spec.name}.w"],
                    model.params[f"{spec.name}.b"],
                    groups=spec.groups,
                    padding="same",
                )
            observe(spec.name, feats.data)
            if model.head_kind == "beta":
                if spec.name in stage_ends:
                    stage = stage_ends[spec.name]
                    pooled = T.global_avg_pool(feats)
                    observe(f"heads.{stage}.pooled", pooled.data)
                    for c in range(cfg.n_events):
                        z = T.linear(
                            pooled,
                            model.params[f"heads.{stage}.{c}.w"],
                            model.params[f"heads.{stage}.{c}.b"],
                        )
                        observe(f"heads.{stage}.{c}", z.data)
        if model.head_kind == "softmax":
            pooled = T.global_avg_pool(feats)
            observe("head.pooled", pooled.data)
            z = T.linear(pooled, model.params["head.w"], model.params["head.b"])
            observe("head", z.data)

    qweights, wscales, biases = {}, {}, {}
    for name, p in model.params.items():
        if name.endswith(".w"):
            q, s = quantize_weight(p.data)
            qweights[name] = q
            wscales[name] = s
        else:
            biases[name] = p.data.astype(np.float32)
    act_calib = {p: _calibrate_affine(*ranges[p]) for p in _observation_points(cfg, model.head_kind)}
    return QuantizedModel(
        config=cfg,
        head_kind=model.head_kind,
        qweights=qweights,
        wscales=wscales,
        biases=biases,
        act_calib=act_calib,
        extras=dict(model.extras),
    )


def _stage_end_layers(cfg: BackboneConfig) -> dict[str, int]:
    """Name of the last layer of each stage -> stage index."""
    last_by_stage: dict[int, str] = {}
    for spec in M.backbone_layers(cfg):
        last_by_stage[spec.stage] = spec.name
    return {name: stage for stage, name in last_by_stage.items()}


def quantized_forward(qmodel: QuantizedModel, x, depth: str | int = "deep") -> list[StageOutput]:
    return qmodel.forward(x, depth)
