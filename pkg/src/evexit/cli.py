"""Command-line entry point.

Subcommands: gen-data, search, train, eval, infer, quantize, profile,
robustness. Every artifact-producing run writes a resolved-config snapshot
(run_config.json) next to its outputs and is byte-reproducible under a fixed
seed with --jobs 1. A TOML file passed via --config supplies per-command
defaults; explicit flags win. Relative --out paths resolve under
$EVEXIT_OUT_DIR when that variable is set.

Exit codes: 0 success, 2 usage error, 3 dataset error, 4 model/config error,
1 anything else. Failures print one machine-parseable JSON line to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib  # python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import features as F
from . import memory, metrics, model as M, quantize, runtime, training
from .data import Dataset, DatasetError, gen_synthetic, smote_upsample
from .evidential import LossConfig
from .model import BackboneConfig, ConfigError, ModelFormatError, load_model, save_model
from .quantize import QuantizedModel, quantize_model
from .runtime import ExitPolicy, infer_with_exits, write_trace_outputs
from .training import BaselineBundle, Hyper, SearchSpace

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_MODEL = 4
EXIT_OTHER = 1

_SUP = argparse.SUPPRESS

DEFAULTS: dict[str, dict] = {
    "gen-data": {
        "events": 3,
        "n": 200,
        "n_test": None,
        "snr": "-10,20",
        "sample_rate": 4000,
        "duration": 1.0,
        "seed": 0,
    },
    "search": {
        "channels": "32,64",
        "ops": "3,4,5,6,7",
        "override_grid": False,
        "epochs": 30,
        "patience": 5,
        "lr": 1e-3,
        "batch_size": 32,
        "optimizer": "adam",
        "lam": 0.1,
        "anneal": 10,
        "score_denominator": "macs",
        "jobs": 1,
        "seed": 0,
        "smote_event": None,
        "smote_target": None,
        "smote_k": 5,
    },
    "train": {
        "channels": 32,
        "ops": 3,
        "override_grid": False,
        "baseline": None,
        "no_freeze": False,
        "epochs": 30,
        "patience": 5,
        "lr": 1e-3,
        "batch_size": 32,
        "optimizer": "adam",
        "lam": 0.1,
        "anneal": 10,
        "seed": 0,
        "smote_event": None,
        "smote_target": None,
        "smote_k": 5,
    },
    "eval": {"kind": "auto", "tau": 0.0, "rule": "all_heads", "split": "test", "seed": 0},
    "infer": {"tau": 0.1, "rule": "all_heads", "split": "test", "seed": 0},
    "quantize": {"calib_n": 128, "split": "train", "seed": 0},
    "profile": {"tau_grid": "0:1:0.1", "rule": "all_heads", "split": "test", "jobs": 1, "seed": 0},
    "robustness": {
        "kind": "auto",
        "gaussian": "",
        "zero_mask": "",
        "tau": 0.0,
        "rule": "all_heads",
        "split": "test",
        "seed": 0,
    },
}

_FEATURE_DEFAULTS = {"frame_ms": 80.0, "hop_ms": 40.0, "n_mels": 24, "n_mfcc": 10}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _parse_int_list(text: str) -> list[int]:
    return [int(v) for v in str(text).split(",") if v != ""]


def _parse_float_list(text: str) -> list[float]:
    return [float(v) for v in str(text).split(",") if v != ""]


def _parse_tau_grid(text: str) -> list[float]:
    """start:stop:step inclusive, or a comma list of values."""
    if ":" in text:
        start, stop, step = (float(v) for v in text.split(":"))
        n = int(round((stop - start) / step)) + 1
        return [round(start + i * step, 10) for i in range(n)]
    return _parse_float_list(text)


def _resolve_out(path: str) -> Path:
    base = os.environ.get("EVEXIT_OUT_DIR")
    p = Path(path)
    if base and not p.is_absolute():
        return Path(base) / p
    return p


def _write_snapshot(command: str, args: dict, out: Path, is_dir: bool) -> None:
    snap = {"command": command, "args": {k: v for k, v in sorted(args.items())}}
    if is_dir:
        out.mkdir(parents=True, exist_ok=True)
        target = out / "run_config.json"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        target = out.parent / f"{out.stem}_run_config.json"
    with open(target, "w") as fh:
        json.dump(snap, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _load_dataset(path: str) -> Dataset:
    try:
        return Dataset.load(path)
    except (DatasetError, FileNotFoundError, OSError) as exc:
        raise CliError(EXIT_DATA, f"cannot load dataset at {path}: {exc}") from exc


def _feature_cfg(dataset: Dataset, args: dict) -> F.FeatureConfig:
    return F.FeatureConfig(
        sample_rate=dataset.sample_rate,
        frame_len_ms=float(args.get("frame_ms", _FEATURE_DEFAULTS["frame_ms"])),
        hop_ms=float(args.get("hop_ms", _FEATURE_DEFAULTS["hop_ms"])),
        n_mels=int(args.get("n_mels", _FEATURE_DEFAULTS["n_mels"])),
        n_mfcc=int(args.get("n_mfcc", _FEATURE_DEFAULTS["n_mfcc"])),
    )


def _apply_smote(dataset: Dataset, args: dict) -> Dataset:
    if args.get("smote_event") is None:
        return dataset
    if args.get("smote_target") is None:
        raise CliError(EXIT_USAGE, "--smote-event requires --smote-target")
    return smote_upsample(
        dataset,
        int(args["smote_event"]),
        int(args["smote_target"]),
        k=int(args.get("smote_k", 5)),
        seed=int(args["seed"]),
    )


def _train_features(dataset: Dataset, fcfg: F.FeatureConfig):
    feats = F.extract_mfcc_batch(dataset.signals["train"], fcfg)
    return feats, dataset.labels["train"]


def _hyper(args: dict) -> Hyper:
    return Hyper(
        lr=float(args["lr"]),
        batch_size=int(args["batch_size"]),
        epochs=int(args["epochs"]),
        patience=int(args["patience"]),
        optimizer=str(args["optimizer"]),
        seed=int(args["seed"]),
    )


def _loss_cfg(args: dict) -> LossConfig:
    return LossConfig(lam=float(args["lam"]), anneal_epochs=int(args["anneal"]))


def _load_model_or_bundle(path_str: str):
    """Returns (auto_kind, bundle) for .ucm files, bundle.json or a bundle dir."""
    path = Path(path_str)
    if path.is_dir():
        path = path / "bundle.json"
    try:
        if path.suffix == ".json":
            spec = json.loads(path.read_text())
            members = [load_model(path.parent / m) for m in spec["members"]]
            return "deep_ensemble", BaselineBundle(kind="deep_ensemble", models=members)
        model = load_model(path)
    except FileNotFoundError as exc:
        raise CliError(EXIT_MODEL, f"model not found: {path}") from exc
    except ModelFormatError as exc:
        raise CliError(EXIT_MODEL, f"cannot load model {path}: {exc}") from exc
    if model.head_kind == "beta":
        return "cascade", model
    if model.extras.get("augment"):
        return "input_aug", BaselineBundle(kind="input_aug", models=[model], augment=model.extras["augment"])
    return "softmax_single", BaselineBundle(kind="softmax_single", models=[model])


def _resolve_kind(requested: str, auto_kind: str) -> str:
    if requested in (None, "auto"):
        return auto_kind
    if requested != auto_kind:
        compatible = requested == "softmax_single" and auto_kind == "input_aug"
        if not compatible:
            raise CliError(EXIT_MODEL, f"model is a {auto_kind} bundle, not {requested}")
    return requested


def cmd_gen_data(args: dict) -> int:
    out = _resolve_out(args["out"])
    snr = _parse_float_list(args["snr"])
    if len(snr) != 2:
        raise CliError(EXIT_USAGE, f"--snr needs two values, got {args['snr']!r}")
    ds = gen_synthetic(
        n_events=int(args["events"]),
        n_per_event=int(args["n"]),
        snr_db_range=(snr[0], snr[1]),
        seed=int(args["seed"]),
        sample_rate=int(args["sample_rate"]),
        duration=float(args["duration"]),
        n_test=None if args["n_test"] is None else int(args["n_test"]),
    )
    ds.save(out)
    _write_snapshot("gen-data", args, out, is_dir=True)
    print(f"wrote dataset with {ds.n_events} events to {out}")
    return EXIT_OK


def cmd_search(args: dict) -> int:
    out = _resolve_out(args["out"])
    dataset = _apply_smote(_load_dataset(args["data"]), args)
    fcfg = _feature_cfg(dataset, args)
    feats, labels = _train_features(dataset, fcfg)
    space = SearchSpace(
        channels=tuple(_parse_int_list(args["channels"])),
        ops=tuple(_parse_int_list(args["ops"])),
        allow_custom=bool(args["override_grid"]),
    )
    try:
        result = training.search(
            space,
            feats,
            labels,
            _hyper(args),
            _loss_cfg(args),
            score_denominator=str(args["score_denominator"]),
            jobs=int(args["jobs"]),
        )
    except ConfigError as exc:
        raise CliError(EXIT_MODEL, str(exc)) from exc
    out.mkdir(parents=True, exist_ok=True)
    training.write_search_table(result, out / "search_table.csv")
    with open(out / "best_config.json", "w") as fh:
        json.dump(result.best_config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_snapshot("search", args, out, is_dir=True)
    best = result.best_config
    print(f"best config: channels={best.channels} ops={best.blocks}")
    return EXIT_OK


def cmd_train(args: dict) -> int:
    out = _resolve_out(args["out"])
    dataset = _apply_smote(_load_dataset(args["data"]), args)
    fcfg = _feature_cfg(dataset, args)
    feats, labels = _train_features(dataset, fcfg)
    try:
        cfg = BackboneConfig(
            channels=int(args["channels"]),
            blocks=int(args["ops"]),
            input_shape=tuple(feats.shape[-3:]),
            n_events=dataset.n_events,
            allow_custom=bool(args["override_grid"]),
        )
    except ConfigError as exc:
        raise CliError(EXIT_MODEL, str(exc)) from exc
    hyper = _hyper(args)
    baseline = args["baseline"]
    if baseline is None:
        model = M.build_model(cfg, seed=hyper.seed)
        training.cascade_train(
            model, feats, labels, hyper, _loss_cfg(args), freeze=not bool(args["no_freeze"])
        )
        save_model(model, out)
        _write_snapshot("train", args, out, is_dir=False)
        print(f"wrote cascade model to {out}")
        return EXIT_OK
    bundle = training.train_baselines(baseline, cfg, feats, labels, hyper)
    if baseline == "deep_ensemble":
        out.mkdir(parents=True, exist_ok=True)
        members = []
        for i, m in enumerate(bundle.models):
            name = f"member_{i}.ucm"
            save_model(m, out / name)
            members.append(name)
        with open(out / "bundle.json", "w") as fh:
            json.dump({"kind": "deep_ensemble", "members": members}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_snapshot("train", args, out, is_dir=True)
    else:
        save_model(bundle.models[0], out)
        _write_snapshot("train", args, out, is_dir=False)
    print(f"wrote {baseline} baseline to {out}")
    return EXIT_OK


def cmd_eval(args: dict) -> int:
    out = _resolve_out(args["out"])
    dataset = _load_dataset(args["data"])
    fcfg = _feature_cfg(dataset, args)
    auto_kind, bundle = _load_model_or_bundle(args["model"])
    kind = _resolve_kind(args["kind"], auto_kind)
    policy = ExitPolicy(tau=float(args["tau"]), rule=str(args["rule"]))
    try:
        res = metrics.evaluate_system(
            kind, bundle, dataset, fcfg, split=str(args["split"]), policy=policy, seed=int(args["seed"])
        )
    except ValueError as exc:
        raise CliError(EXIT_MODEL, str(exc)) from exc
    out.mkdir(parents=True, exist_ok=True)
    payload = {"kind": kind, "report": res.report.to_dict()}
    if res.mean_macs is not None:
        payload["mean_macs"] = res.mean_macs
    with open(out / "report.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_snapshot("eval", args, out, is_dir=True)
    print(f"accuracy={res.report.accuracy:.4f} nll={res.report.nll:.4f}")
    return EXIT_OK


def cmd_infer(args: dict) -> int:
    out = _resolve_out(args["out"])
    dataset = _load_dataset(args["data"])
    fcfg = _feature_cfg(dataset, args)
    auto_kind, bundle = _load_model_or_bundle(args["model"])
    if auto_kind != "cascade":
        raise CliError(EXIT_MODEL, "infer requires an evidence-head cascade model")
    feats = F.extract_mfcc_batch(dataset.signals[str(args["split"])], fcfg)
    policy = ExitPolicy(tau=float(args["tau"]), rule=str(args["rule"]))
    traces = infer_with_exits(bundle, feats, policy)
    write_trace_outputs(traces, dataset.event_names, out)
    _write_snapshot("infer", args, out, is_dir=True)
    summary = runtime.trace_summary(traces)
    print(f"mean MACs {summary['mean_macs']:.0f} over {summary['n_samples']} samples")
    return EXIT_OK


def cmd_quantize(args: dict) -> int:
    out = _resolve_out(args["out"])
    dataset = _load_dataset(args["data"])
    fcfg = _feature_cfg(dataset, args)
    auto_kind, bundle = _load_model_or_bundle(args["model"])
    model = bundle if auto_kind == "cascade" else bundle.models[0]
    if isinstance(model, QuantizedModel):
        raise CliError(EXIT_MODEL, "model is already quantized")
    split = str(args["split"])
    calib_feats = F.extract_mfcc_batch(dataset.signals[split], fcfg)[: int(args["calib_n"])]
    qmodel = quantize_model(model, calib_feats)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(qmodel, out)
    drop = _quantization_drop(model, qmodel, dataset, fcfg, auto_kind, int(args["seed"]))
    with open(out.parent / f"{out.stem}_quantize_report.json", "w") as fh:
        json.dump(drop, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_snapshot("quantize", args, out, is_dir=False)
    print(
        f"accuracy f32={drop['float_accuracy']:.4f} int8={drop['int8_accuracy']:.4f} "
        f"drop={drop['drop']:.4f}"
    )
    return EXIT_OK


def _quantization_drop(model, qmodel, dataset, fcfg, auto_kind, seed) -> dict:
    split = "test" if "test" in dataset.signals else "train"
    kind = "cascade" if auto_kind == "cascade" else "softmax_single"
    wrap = (lambda m: m) if kind == "cascade" else (lambda m: BaselineBundle(kind=kind, models=[m]))
    policy = ExitPolicy(tau=0.0)
    fres = metrics.evaluate_system(kind, wrap(model), dataset, fcfg, split=split, policy=policy, seed=seed)
    qres = metrics.evaluate_system(kind, wrap(qmodel), dataset, fcfg, split=split, policy=policy, seed=seed)
    freport = memory.estimate_memory(model)
    qreport = memory.estimate_memory(qmodel)
    return {
        "split": split,
        "float_accuracy": fres.report.accuracy,
        "int8_accuracy": qres.report.accuracy,
        "drop": fres.report.accuracy - qres.report.accuracy,
        "float_param_bytes": freport.param_bytes,
        "int8_param_bytes": qreport.param_bytes,
        "float_weight_bytes": freport.weight_bytes,
        "int8_weight_bytes": qreport.weight_bytes,
    }


def _profile_worker(payload):
    model_bytes, feats, labels, tau, rule = payload
    model = M.deserialize(model_bytes)
    return metrics.exit_profile(model, feats, labels, [tau], rule=rule)[0]


def cmd_profile(args: dict) -> int:
    out = _resolve_out(args["out"])
    dataset = _load_dataset(args["data"])
    fcfg = _feature_cfg(dataset, args)
    auto_kind, model = _load_model_or_bundle(args["model"])
    if auto_kind != "cascade":
        raise CliError(EXIT_MODEL, "profile requires an evidence-head cascade model")
    split = str(args["split"])
    feats = F.extract_mfcc_batch(dataset.signals[split], fcfg)
    labels = dataset.labels[split]
    taus = _parse_tau_grid(str(args["tau_grid"]))
    rule = str(args["rule"])
    jobs = int(args["jobs"])
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        blob = model.serialize() if isinstance(model, QuantizedModel) else M.serialize(model)
        work = [(blob, feats, labels, tau, rule) for tau in taus]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_profile_worker, work))
    else:
        rows = metrics.exit_profile(model, feats, labels, taus, rule=rule)
    metrics.write_profile(rows, out)
    _write_snapshot("profile", args, out, is_dir=True)
    print(f"profiled {len(rows)} thresholds to {out}")
    return EXIT_OK


def cmd_robustness(args: dict) -> int:
    out = _resolve_out(args["out"])
    dataset = _load_dataset(args["data"])
    fcfg = _feature_cfg(dataset, args)
    auto_kind, bundle = _load_model_or_bundle(args["model"])
    kind = _resolve_kind(args["kind"], auto_kind)
    grid: list[tuple[str, float]] = [("none", 0.0)]
    grid += [("gaussian", v) for v in _parse_float_list(args["gaussian"])]
    grid += [("zero_mask", v) for v in _parse_float_list(args["zero_mask"])]
    policy = ExitPolicy(tau=float(args["tau"]), rule=str(args["rule"]))
    report = metrics.robustness_eval(
        kind, bundle, dataset, fcfg, grid, split=str(args["split"]), policy=policy, seed=int(args["seed"])
    )
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "robustness.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_snapshot("robustness", args, out, is_dir=True)
    print(f"evaluated {len(grid)} corruption levels to {out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "search": cmd_search,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "quantize": cmd_quantize,
    "profile": cmd_profile,
    "robustness": cmd_robustness,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evexit",
        description="Uncertainty-aware early-exit cascade event detection",
    )
    parser.add_argument("--config", help="TOML file with per-command default sections")
    sub = parser.add_subparsers(dest="command", required=True)

    def opt(sp, *flags, **kw):
        kw.setdefault("default", _SUP)
        sp.add_argument(*flags, **kw)

    sp = sub.add_parser("gen-data", help="generate a synthetic event dataset")
    sp.add_argument("--out", required=True, help="output dataset directory")
    opt(sp, "--events", type=int, help="number of event classes (default 3)")
    opt(sp, "--n", type=int, help="train samples per event (default 200)")
    opt(sp, "--n-test", dest="n_test", type=int, help="total test samples (default n*events/3)")
    opt(sp, "--snr", help="SNR range in dB as LO,HI (default -10,20)")
    opt(sp, "--sample-rate", dest="sample_rate", type=int, help="Hz (default 4000)")
    opt(sp, "--duration", type=float, help="seconds per signal (default 1.0)")
    opt(sp, "--seed", type=int, help="RNG seed (default 0)")

    def common_feature_opts(sp):
        opt(sp, "--frame-ms", dest="frame_ms", type=float, help="MFCC frame length in ms (default 80)")
        opt(sp, "--hop-ms", dest="hop_ms", type=float, help="MFCC hop in ms (default 40)")
        opt(sp, "--n-mels", dest="n_mels", type=int, help="mel filters (default 24)")
        opt(sp, "--n-mfcc", dest="n_mfcc", type=int, help="MFCC coefficients kept (default 10)")

    def common_train_opts(sp):
        opt(sp, "--epochs", type=int, help="max epochs (default 30)")
        opt(sp, "--patience", type=int, help="early-stopping patience (default 5)")
        opt(sp, "--lr", type=float, help="learning rate (default 1e-3)")
        opt(sp, "--batch-size", dest="batch_size", type=int, help="batch size (default 32)")
        opt(sp, "--optimizer", choices=["adam", "sgd"], help="optimizer (default adam)")
        opt(sp, "--lambda", dest="lam", type=float, help="entropy regularizer weight (default 0.1)")
        opt(sp, "--anneal", type=int, help="epochs to ramp lambda from 0 (default 10)")
        opt(sp, "--seed", type=int, help="RNG seed (default 0)")
        opt(sp, "--smote-event", dest="smote_event", type=int, help="event index to SMOTE-upsample")
        opt(sp, "--smote-target", dest="smote_target", type=int, help="target positive count for SMOTE")
        opt(sp, "--smote-k", dest="smote_k", type=int, help="SMOTE neighbour count (default 5)")

    sp = sub.add_parser("search", help="exhaustive architecture search over (channels, ops)")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="output directory")
    opt(sp, "--channels", help="comma list of channel widths (default 32,64)")
    opt(sp, "--ops", help="comma list of block counts (default 3,4,5,6,7)")
    opt(sp, "--override-grid", dest="override_grid", action="store_true", help="allow off-grid test-scale configs")
    opt(sp, "--score-denominator", dest="score_denominator", choices=["macs", "blocks"], help="tradeoff denominator (default macs)")
    opt(sp, "--jobs", type=int, help="parallel candidate workers (default 1)")
    common_train_opts(sp)
    common_feature_opts(sp)

    sp = sub.add_parser("train", help="train a cascade model or a baseline bundle")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="output .ucm path (directory for deep_ensemble)")
    opt(sp, "--channels", type=int, help="channel width (default 32)")
    opt(sp, "--ops", type=int, help="block count (default 3)")
    opt(sp, "--override-grid", dest="override_grid", action="store_true", help="allow off-grid test-scale configs")
    opt(sp, "--baseline", choices=["softmax_single", "deep_ensemble", "input_aug"], help="train a baseline instead of the cascade")
    opt(sp, "--no-freeze", dest="no_freeze", action="store_true", help="train all exits jointly instead of stage-wise")
    common_train_opts(sp)
    common_feature_opts(sp)

    sp = sub.add_parser("eval", help="calibration report for a trained system")
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True, help=".ucm file, bundle.json or bundle directory")
    sp.add_argument("--out", required=True)
    opt(sp, "--kind", choices=["auto", "cascade", "softmax_single", "deep_ensemble", "input_aug"], help="system kind (default auto)")
    opt(sp, "--tau", type=float, help="exit threshold (default 0.0)")
    opt(sp, "--rule", choices=list(runtime.RULES), help="exit rule (default all_heads)")
    opt(sp, "--split", help="dataset split (default test)")
    opt(sp, "--seed", type=int, help="RNG seed for jitter baselines (default 0)")
    common_feature_opts(sp)

    sp = sub.add_parser("infer", help="early-exit inference traces")
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    opt(sp, "--tau", type=float, help="exit threshold (default 0.1)")
    opt(sp, "--rule", choices=list(runtime.RULES), help="exit rule (default all_heads)")
    opt(sp, "--split", help="dataset split (default test)")
    opt(sp, "--seed", type=int, help="RNG seed (default 0)")
    common_feature_opts(sp)

    sp = sub.add_parser("quantize", help="int8 post-training quantization")
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True, help="output quantized .ucm path")
    opt(sp, "--calib-n", dest="calib_n", type=int, help="calibration sample count (default 128)")
    opt(sp, "--split", help="calibration split (default train)")
    opt(sp, "--seed", type=int, help="RNG seed (default 0)")
    common_feature_opts(sp)

    sp = sub.add_parser("profile", help="threshold sweep: exit rates, MACs, accuracy")
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    opt(sp, "--tau-grid", dest="tau_grid", help="start:stop:step or comma list (default 0:1:0.1)")
    opt(sp, "--rule", choices=list(runtime.RULES), help="exit rule (default all_heads)")
    opt(sp, "--split", help="dataset split (default test)")
    opt(sp, "--jobs", type=int, help="parallel threshold workers (default 1)")
    opt(sp, "--seed", type=int, help="RNG seed (default 0)")
    common_feature_opts(sp)

    sp = sub.add_parser("robustness", help="accuracy and uncertainty under signal corruption")
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    opt(sp, "--kind", choices=["auto", "cascade", "softmax_single", "deep_ensemble", "input_aug"], help="system kind (default auto)")
    opt(sp, "--gaussian", help="comma list of noise sigmas")
    opt(sp, "--zero-mask", dest="zero_mask", help="comma list of masked fractions")
    opt(sp, "--tau", type=float, help="exit threshold (default 0.0)")
    opt(sp, "--rule", choices=list(runtime.RULES), help="exit rule (default all_heads)")
    opt(sp, "--split", help="dataset split (default test)")
    opt(sp, "--seed", type=int, help="RNG seed (default 0)")
    common_feature_opts(sp)

    return parser


def _merge_args(ns: argparse.Namespace) -> dict:
    command = ns.command
    merged = dict(DEFAULTS[command])
    merged.update(_FEATURE_DEFAULTS)
    if getattr(ns, "config", None):
        with open(ns.config, "rb") as fh:
            doc = tomllib.load(fh)
        section = doc.get(command, {})
        for key, value in section.items():
            merged[key.replace("-", "_")] = value
    provided = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    merged.update(provided)
    return merged


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    args = _merge_args(ns)
    try:
        return COMMANDS[ns.command](args)
    except CliError as exc:
        print(json.dumps({"error": {"code": exc.code, "message": str(exc)}}), file=sys.stderr)
        return exc.code
    except (DatasetError,) as exc:
        print(json.dumps({"error": {"code": EXIT_DATA, "message": str(exc)}}), file=sys.stderr)
        return EXIT_DATA
    except (ModelFormatError, ConfigError) as exc:
        print(json.dumps({"error": {"code": EXIT_MODEL, "message": str(exc)}}), file=sys.stderr)
        return EXIT_MODEL
    except Exception as exc:  # noqa: BLE001 - single line, machine parseable
        print(json.dumps({"error": {"code": EXIT_OTHER, "message": f"{type(exc).__name__}: {exc}"}}), file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
