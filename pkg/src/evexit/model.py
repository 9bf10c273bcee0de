"""The searchable cascade backbone with per-stage evidence heads.

A model is a 3x3 stem convolution followed by O depthwise blocks
(1x1 conv -> relu -> 3x3 depthwise -> relu -> 1x1 conv -> relu, constant
width L, same padding throughout) partitioned into three stages. Each stage
feeds C event heads (global average pool -> linear L->2) whose logits map
to Beta evidence. A "softmax" head variant (single linear L->n_events plus
softmax at the deepest stage) backs the point-prediction baselines.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evidential, tensor as T
from .tensor import Tensor

__all__ = [
    "CHANNEL_GRID",
    "OPS_GRID",
    "DEPTH_NAMES",
    "BackboneConfig",
    "CascadeModel",
    "StageOutput",
    "ConfigError",
    "ModelFormatError",
    "VersionMismatchError",
    "TruncatedModelError",
    "TensorSpecError",
    "build_model",
    "stage_partition",
    "count_macs",
    "count_params",
    "serialize",
    "deserialize",
    "save_model",
    "load_model",
]

CHANNEL_GRID = (32, 64, 96, 128, 160, 192, 224, 256, 320, 384, 448, 512)
OPS_GRID = (3, 4, 5, 6, 7)
DEPTH_NAMES = ("shallow", "medium", "deep")

FORMAT_VERSION = 1
_MAGIC = b"UCMF"
_DTYPES = {"f32": np.float32, "f64": np.float64, "i8": np.int8}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64", np.dtype(np.int8): "i8"}


class ConfigError(ValueError):
    """Backbone configuration outside the supported space."""


class ModelFormatError(ValueError):
    """Model file cannot be parsed."""


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedModelError(ModelFormatError):
    pass


class TensorSpecError(ModelFormatError):
    """Header tensor table inconsistent with the payload; names the tensor."""


def stage_partition(n_blocks: int) -> tuple[int, int, int]:
    """Near-equal three-way split, remainder assigned from the deepest stage
    backward: 7 -> (2, 2, 3), 5 -> (1, 2, 2)."""
    base = n_blocks // 3
    rem = n_blocks - 3 * base
    parts = [base, base, base]
    for i in range(rem):
        parts[2 - i] += 1
    return tuple(parts)


@dataclass(frozen=True)
class BackboneConfig:
    channels: int
    blocks: int
    input_shape: tuple[int, int, int]  # (C_in, H, W)
    n_events: int
    allow_custom: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.n_events < 1:
            raise ConfigError(f"n_events must be >= 1, got {self.n_events}")
        if len(self.input_shape) != 3 or any(v < 1 for v in self.input_shape):
            raise ConfigError(f"bad input_shape {self.input_shape}")
        if not self.allow_custom:
            if self.channels not in CHANNEL_GRID:
                raise ConfigError(
                    f"channels {self.channels} outside grid {CHANNEL_GRID}; "
                    "pass allow_custom=True for test-scale configs"
                )
            if self.blocks not in OPS_GRID:
                raise ConfigError(
                    f"blocks {self.blocks} outside grid {OPS_GRID}; "
                    "pass allow_custom=True for test-scale configs"
                )
        if self.channels < 1 or self.blocks < 2:
            raise ConfigError(f"need channels >= 1 and blocks >= 2, got {self.channels}/{self.blocks}")

    @property
    def partition(self) -> tuple[int, int, int]:
        return stage_partition(self.blocks)

    def block_stage(self, block_index: int) -> int:
        p = self.partition
        if block_index < p[0]:
            return 0
        if block_index < p[0] + p[1]:
            return 1
        return 2

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "blocks": self.blocks,
            "input_shape": list(self.input_shape),
            "n_events": self.n_events,
            "allow_custom": self.allow_custom,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(
            channels=int(d["channels"]),
            blocks=int(d["blocks"]),
            input_shape=tuple(d["input_shape"]),
            n_events=int(d["n_events"]),
            allow_custom=bool(d.get("allow_custom", False)),
        )


@dataclass(frozen=True)
class LayerSpec:
    """One backbone layer; the single source of truth shared by the float
    forward, the fake-quant forward, the MAC counter and the memory model."""

    name: str
    kind: str  # conv | relu
    in_ch: int = 0
    out_ch: int = 0
    kernel: tuple[int, int] = (1, 1)
    groups: int = 1
    stage: int = 0


def backbone_layers(cfg: BackboneConfig) -> list[LayerSpec]:
    c_in = cfg.input_shape[0]
    L = cfg.channels
    layers = [
        LayerSpec("stem", "conv", c_in, L, (3, 3), 1, 0),
        LayerSpec("stem.relu", "relu", L, L, stage=0),
    ]
    for i in range(cfg.blocks):
        s = cfg.block_stage(i)
        prefix = f"blocks.{i}"
        layers += [
            LayerSpec(f"{prefix}.pw1", "conv", L, L, (1, 1), 1, s),
            LayerSpec(f"{prefix}.pw1.relu", "relu", L, L, stage=s),
            LayerSpec(f"{prefix}.dw", "conv", L, L, (3, 3), L, s),
            LayerSpec(f"{prefix}.dw.relu", "relu", L, L, stage=s),
            LayerSpec(f"{prefix}.pw2", "conv", L, L, (1, 1), 1, s),
            LayerSpec(f"{prefix}.pw2.relu", "relu", L, L, stage=s),
        ]
    return layers


@dataclass
class StageOutput:
    """Feature map and per-event head logits produced at one exit."""

    stage: int
    features: Tensor
    logits: Tensor  # (..., C, 2) for beta heads

    def evidence(self) -> evidential.BetaEvidence:
        return evidential.beta_from_logits(np.asarray(self.logits.data))

    def prediction(self) -> dict[str, np.ndarray]:
        return evidential.beta_prediction(self.evidence())


@dataclass
class CascadeModel:
    config: BackboneConfig
    params: dict[str, Tensor]
    head_kind: str = "beta"  # beta | softmax
    extras: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def param_names_by_stage(self, stage: int) -> list[str]:
        """Backbone and head parameters owned by one stage (stem is stage 0)."""
        names = []
        for spec in backbone_layers(self.config):
            if spec.kind == "conv" and spec.stage == stage:
                names += [f"{spec.name}.w", f"{spec.name}.b"]
        if self.head_kind == "beta":
            for c in range(self.config.n_events):
                names += [f"heads.{stage}.{c}.w", f"heads.{stage}.{c}.b"]
        elif stage == 2:
            names += ["head.w", "head.b"]
        return names

    def subset(self, names: list[str]) -> dict[str, Tensor]:
        return {n: self.params[n] for n in names}

    def _check_input(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        expect = tuple(self.config.input_shape)
        got = x.shape[-3:] if x.ndim >= 3 else x.shape
        if got != expect:
            raise T.ShapeError(f"input shape {x.shape} does not match model input {expect}")
        if not np.all(np.isfinite(x.data)):
            raise ValueError("non-finite values in model input")
        return x

    def stage_forward(self, feats: Tensor, stage: int) -> StageOutput:
        """Advance one stage: its blocks (plus the stem for stage 0), then heads."""
        if self.head_kind != "beta":
            raise ValueError("stage_forward() is for evidence-head models; use forward_softmax")
        for spec in backbone_layers(self.config):
            if spec.stage == stage:
                feats = self._apply(spec, feats)
        pooled = T.global_avg_pool(feats)
        per_event = [
            T.linear(pooled, self.params[f"heads.{stage}.{c}.w"], self.params[f"heads.{stage}.{c}.b"])
            for c in range(self.config.n_events)
        ]
        return StageOutput(stage=stage, features=feats, logits=T.stack(per_event, axis=-2))

    def forward(self, x, depth: str | int = "deep") -> list[StageOutput]:
        """Run stages 0..depth; each stage emits features plus head logits."""
        max_stage = _depth_index(depth)
        feats = self._check_input(x)
        outputs = []
        for stage in range(max_stage + 1):
            out = self.stage_forward(feats, stage)
            feats = out.features
            outputs.append(out)
        return outputs

    def forward_softmax(self, x) -> Tensor:
        """Full-depth forward through the single C-way softmax head."""
        if self.head_kind != "softmax":
            raise ValueError("forward_softmax() needs a softmax-head model")
        x = self._check_input(x)
        feats = x
        for spec in backbone_layers(self.config):
            feats = self._apply(spec, feats)
        pooled = T.global_avg_pool(feats)
        return T.softmax(T.linear(pooled, self.params["head.w"], self.params["head.b"]), axis=-1)

    def _apply(self, spec: LayerSpec, x: Tensor) -> Tensor:
        if spec.kind == "relu":
            return T.relu(x)
        return T.conv2d(
            x,
            self.params[f"{spec.name}.w"],
            self.params[f"{spec.name}.b"],
            groups=spec.groups,
            padding="same",
        )


def _depth_index(depth: str | int) -> int:
    if isinstance(depth, str):
        if depth not in DEPTH_NAMES:
            raise ValueError(f"depth must be one of {DEPTH_NAMES}, got {depth!r}")
        return DEPTH_NAMES.index(depth)
    if depth not in (0, 1, 2):
        raise ValueError(f"depth index must be 0..2, got {depth}")
    return depth


def build_model(
    cfg: BackboneConfig,
    seed: int = 0,
    dtype=np.float32,
    head_kind: str = "beta",
) -> CascadeModel:
    """Deterministic init under seed.

    Convolutions and the softmax head use Kaiming-uniform fan-in weights with
    zero bias. Evidence heads start at zero weights and bias +1 so both
    relu-mapped evidence units are alive for every sample; a head whose logit
    is negative across a whole class at init would otherwise never receive
    gradient and stay at u = 1 permanently.
    """
    if head_kind not in ("beta", "softmax"):
        raise ValueError(f"unknown head kind {head_kind!r}")
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    params: dict[str, Tensor] = {}

    def add_conv(name: str, out_ch: int, in_ch_per_group: int, kh: int, kw: int):
        fan_in = in_ch_per_group * kh * kw
        w = T.kaiming_uniform(rng, (out_ch, in_ch_per_group, kh, kw), fan_in, dtype)
        params[f"{name}.w"] = Tensor(w, requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    for spec in backbone_layers(cfg):
        if spec.kind == "conv":
            add_conv(spec.name, spec.out_ch, spec.in_ch // spec.groups, *spec.kernel)
    if head_kind == "beta":
        for stage in range(3):
            for c in range(cfg.n_events):
                params[f"heads.{stage}.{c}.w"] = Tensor(
                    np.zeros((2, cfg.channels), dtype=dtype), requires_grad=True
                )
                params[f"heads.{stage}.{c}.b"] = Tensor(
                    np.ones(2, dtype=dtype), requires_grad=True
                )
    else:
        w = T.kaiming_uniform(rng, (cfg.n_events, cfg.channels), cfg.channels, dtype)
        params["head.w"] = Tensor(w, requires_grad=True)
        params["head.b"] = Tensor(np.zeros(cfg.n_events, dtype=dtype), requires_grad=True)
    return CascadeModel(config=cfg, params=params, head_kind=head_kind)


def count_macs(cfg: BackboneConfig, depth: str | int = "deep", head_kind: str = "beta") -> int:
    """Multiply-accumulates to run inference through the given exit.

    Convolutions and linears count output_elements * kernel_elements *
    (C_in / groups); relu and pooling are MAC-free. Cumulative over stages,
    including every evaluated head at or below the exit.
    """
    max_stage = _depth_index(depth)
    _, h, w = cfg.input_shape
    total = 0
    for spec in backbone_layers(cfg):
        if spec.kind != "conv" or spec.stage > max_stage:
            continue
        kh, kw = spec.kernel
        total += h * w * spec.out_ch * (kh * kw * spec.in_ch // spec.groups)
    if head_kind == "beta":
        total += (max_stage + 1) * cfg.n_events * 2 * cfg.channels
    elif max_stage == 2:
        total += cfg.n_events * cfg.channels
    return total


def count_params(model: CascadeModel) -> int:
    return sum(p.size for p in model.params.values())


def serialize(model: CascadeModel) -> bytes:
    """JSON header (config + tensor table) plus little-endian weight blob."""
    table = []
    blob = bytearray()
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name].data)
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        table.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": _DTYPE_NAMES[arr.dtype],
                "offset": len(blob),
                "nbytes": len(raw),
            }
        )
        blob += raw
    header = {
        "format_version": FORMAT_VERSION,
        "head_kind": model.head_kind,
        "config": model.config.to_dict(),
        "tensors": table,
        "quant": None,
        "extras": dict(model.extras),
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    return _MAGIC + struct.pack("<I", len(hdr)) + hdr + bytes(blob)


def _parse_container(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:4] != _MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    if len(data) < 8:
        raise TruncatedModelError("file ends inside the length prefix")
    (hdr_len,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + hdr_len:
        raise TruncatedModelError("file ends inside the header")
    try:
        header = json.loads(data[8 : 8 + hdr_len].decode())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"header is not valid JSON: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    blob = data[8 + hdr_len :]
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        name = entry["name"]
        if entry["dtype"] not in _DTYPES:
            raise TensorSpecError(f"tensor {name!r}: unknown dtype {entry['dtype']!r}")
        dt = np.dtype(_DTYPES[entry["dtype"]]).newbyteorder("<")
        expected = int(np.prod(entry["shape"], dtype=np.int64)) * dt.itemsize
        if entry["nbytes"] != expected:
            raise TensorSpecError(
                f"tensor {name!r}: shape {entry['shape']} implies {expected} bytes, header says {entry['nbytes']}"
            )
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(blob):
            raise TruncatedModelError(f"tensor {name!r} extends past end of file")
        arr = np.frombuffer(blob[lo:hi], dtype=dt).reshape(entry["shape"])
        tensors[name] = arr.astype(dt.newbyteorder("="))
    return header, tensors


def deserialize(data: bytes):
    """Rebuild a CascadeModel, or a QuantizedModel when quant metadata is present."""
    header, tensors = _parse_container(data)
    cfg = BackboneConfig.from_dict(header["config"])
    if header.get("quant"):
        from .quantize import quantized_from_parts

        return quantized_from_parts(header, tensors)
    expected = set(
        f"{n}.{s}" for n in _param_stems(cfg, header["head_kind"]) for s in ("w", "b")
    )
    missing = expected - set(tensors)
    if missing:
        raise TensorSpecError(f"missing tensors: {sorted(missing)[:3]}")
    params = {name: Tensor(arr, requires_grad=True) for name, arr in tensors.items()}
    return CascadeModel(
        config=cfg,
        params=params,
        head_kind=header["head_kind"],
        extras=dict(header.get("extras", {})),
    )


def _param_stems(cfg: BackboneConfig, head_kind: str) -> list[str]:
    stems = [spec.name for spec in backbone_layers(cfg) if spec.kind == "conv"]
    if head_kind == "beta":
        stems += [f"heads.{s}.{c}" for s in range(3) for c in range(cfg.n_events)]
    else:
        stems.append("head")
    return stems


def save_model(model, path: str | Path) -> None:
    data = serialize(model) if isinstance(model, CascadeModel) else model.serialize()
    Path(path).write_bytes(data)


def load_model(path: str | Path):
    return deserialize(Path(path).read_bytes())
