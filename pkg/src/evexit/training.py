"""Training: candidate scoring, exhaustive grid search, cascade phases, baselines.

The search trains every (channels, blocks) combination end to end through the
deep exit and scores accuracy / normalized MACs (MACs divided by the smallest
candidate's), preferring cheap models at equal accuracy. Cascade training then
fits one stage at a time: a fresh optimizer per phase, earlier stages frozen,
and the frozen stage's output feature maps become the next phase's inputs.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import evidential, model as M, optim
from .evidential import LossConfig
from .model import BackboneConfig, CascadeModel, build_model
from .tensor import Tensor, no_grad
from . import tensor as T

__all__ = [
    "Hyper",
    "SearchSpace",
    "SearchResult",
    "BaselineBundle",
    "TrainingDiverged",
    "train_candidate",
    "search",
    "cascade_train",
    "train_baselines",
    "write_search_table",
]


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyper:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    patience: int = 5
    optimizer: str = "adam"
    val_fraction: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class SearchSpace:
    channels: tuple[int, ...]
    ops: tuple[int, ...] = M.OPS_GRID
    allow_custom: bool = False

    def __post_init__(self):
        if not self.channels or not self.ops:
            raise ValueError("search space must have nonempty channel and ops grids")
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        object.__setattr__(self, "ops", tuple(int(v) for v in self.ops))

    def candidates(self, input_shape, n_events) -> list[BackboneConfig]:
        return [
            BackboneConfig(
                channels=L,
                blocks=O,
                input_shape=input_shape,
                n_events=n_events,
                allow_custom=self.allow_custom,
            )
            for L in self.channels
            for O in self.ops
        ]


@dataclass
class SearchResult:
    best_config: BackboneConfig
    rows: list[dict]
    seed: int
    score_denominator: str = "macs"


@dataclass
class BaselineBundle:
    kind: str  # softmax_single | deep_ensemble | input_aug
    models: list[CascadeModel]
    augment: dict | None = None


def _stratified_split(labels: np.ndarray, val_fraction: float, rng: np.random.Generator):
    """Indices for train/val; val takes a per-class share, at least 1 where possible."""
    classes = labels.argmax(axis=1)
    train_idx, val_idx = [], []
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        idx = idx[rng.permutation(len(idx))]
        n_val = max(1, int(round(len(idx) * val_fraction))) if len(idx) > 1 else 0
        val_idx.append(idx[:n_val])
        train_idx.append(idx[n_val:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(val_idx))


def _pooled_accuracy_from_p(p: np.ndarray, labels: np.ndarray) -> float:
    return float((p.argmax(axis=1) == labels.argmax(axis=1)).mean())


def _deep_exit_accuracy(model: CascadeModel, feats: np.ndarray, labels: np.ndarray) -> float:
    with no_grad():
        out = model.forward(feats, "deep")[-1]
    return _pooled_accuracy_from_p(out.prediction()["p"], labels)


def _stage_val_loss(model: CascadeModel, stage: int, feats: np.ndarray, labels: np.ndarray, lam: float) -> float:
    with no_grad():
        out = model.stage_forward(Tensor(feats), stage)
        return evidential.binary_evidence_loss_t(out.logits, labels, lam).item()


def _fit_loop(
    step_fn,
    eval_fn,
    snapshot_params: dict[str, Tensor],
    n_train: int,
    hyper: Hyper,
    rng: np.random.Generator,
    loss_cfg: LossConfig,
    max_epochs: int | None = None,
) -> tuple[float, int]:
    """Minibatch epochs with early stopping on the eval metric.

    step_fn(batch_idx, lam) runs one optimizer step and returns the loss;
    eval_fn() returns the validation metric (higher is better). The best
    snapshot of snapshot_params is restored before returning.
    """
    max_epochs = hyper.epochs if max_epochs is None else max_epochs
    best_metric = -np.inf
    best_state: dict[str, np.ndarray] = {}
    stale = 0
    epochs_run = 0
    for epoch in range(max_epochs):
        lam = loss_cfg.lam_at(epoch)
        perm = rng.permutation(n_train)
        for lo in range(0, n_train, hyper.batch_size):
            batch = perm[lo : lo + hyper.batch_size]
            loss = step_fn(batch, lam)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
        epochs_run = epoch + 1
        metric = eval_fn()
        if metric > best_metric:
            best_metric = metric
            best_state = {k: p.data.copy() for k, p in snapshot_params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    if best_state:
        for k, p in snapshot_params.items():
            p.data[...] = best_state[k]
    return float(best_metric), epochs_run


def train_candidate(
    cfg: BackboneConfig,
    features: np.ndarray,
    labels: np.ndarray,
    hyper: Hyper,
    loss_cfg: LossConfig | None = None,
) -> tuple[CascadeModel, float]:
    """Train through the deep exit only and report best validation accuracy."""
    loss_cfg = loss_cfg or LossConfig()
    if features.shape[0] == 0:
        raise ValueError("empty training data")
    model = build_model(cfg, seed=hyper.seed)
    rng = np.random.default_rng(hyper.seed)
    tr, va = _stratified_split(labels, hyper.val_fraction, rng)
    x_tr, y_tr = features[tr], labels[tr]
    x_va, y_va = features[va], labels[va]
    opt = optim.make_optimizer(hyper.optimizer, model.params, hyper.lr)

    def step(batch, lam):
        opt.zero_grad()
        out = model.forward(Tensor(x_tr[batch]), "deep")[-1]
        loss = evidential.binary_evidence_loss_t(out.logits, y_tr[batch], lam)
        loss.backward()
        opt.step()
        return loss.item()

    acc, _ = _fit_loop(
        step,
        lambda: _deep_exit_accuracy(model, x_va, y_va),
        model.params,
        len(tr),
        hyper,
        rng,
        loss_cfg,
    )
    return model, acc


def _eval_candidate(args) -> dict:
    cfg_dict, features, labels, hyper, loss_cfg = args
    cfg = BackboneConfig.from_dict(cfg_dict)
    macs = M.count_macs(cfg, "deep")
    row = {
        "channels": cfg.channels,
        "ops": cfg.blocks,
        "macs": macs,
        "accuracy": 0.0,
        "status": "ok",
    }
    try:
        _, acc = train_candidate(cfg, features, labels, hyper, loss_cfg)
        row["accuracy"] = acc
    except (TrainingDiverged, FloatingPointError):
        row["status"] = "failed"
    return row


def search(
    space: SearchSpace,
    features: np.ndarray,
    labels: np.ndarray,
    hyper: Hyper,
    loss_cfg: LossConfig | None = None,
    score_denominator: str = "macs",
    jobs: int = 1,
) -> SearchResult:
    """Exhaustive sweep; score = accuracy / (MACs / smallest MACs) by default.

    score_denominator="blocks" divides by the raw block count instead.
    Failed candidates score 0 and the sweep continues; if every candidate
    fails the search errors out.
    """
    if score_denominator not in ("macs", "blocks"):
        raise ValueError(f"unknown score denominator {score_denominator!r}")
    input_shape = tuple(features.shape[-3:])
    n_events = labels.shape[1]
    configs = space.candidates(input_shape, n_events)
    work = [
        (cfg.to_dict(), features, labels, hyper, loss_cfg or LossConfig()) for cfg in configs
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_eval_candidate, work))
    else:
        rows = [_eval_candidate(w) for w in work]
    min_macs = min(r["macs"] for r in rows)
    for r in rows:
        if score_denominator == "macs":
            denom = r["macs"] / min_macs
        else:
            denom = r["ops"]
        r["score"] = r["accuracy"] / denom if r["status"] == "ok" else 0.0
    if all(r["status"] == "failed" for r in rows):
        raise TrainingDiverged("all search candidates diverged")
    best_i = max(range(len(rows)), key=lambda i: (rows[i]["score"], -i))
    return SearchResult(
        best_config=configs[best_i],
        rows=rows,
        seed=hyper.seed,
        score_denominator=score_denominator,
    )


def write_search_table(result: SearchResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channels", "ops", "accuracy", "macs", "score", "status"])
        for r in result.rows:
            writer.writerow(
                [r["channels"], r["ops"], repr(r["accuracy"]), r["macs"], repr(r["score"]), r["status"]]
            )


def cascade_train(
    model: CascadeModel,
    features: np.ndarray,
    labels: np.ndarray,
    hyper: Hyper,
    loss_cfg: LossConfig | None = None,
    freeze: bool = True,
) -> list[dict]:
    """Stage-wise training with one optimizer per exit.

    Phase s fits stage-s blocks plus that stage's event heads on the frozen
    previous stage's output features. Convergence is judged on validation
    loss at the full regularizer weight (patience per phase), which lets
    evidence keep accumulating after accuracy saturates. freeze=False trains
    all exits jointly with a single optimizer on the summed per-exit loss.
    """
    loss_cfg = loss_cfg or LossConfig()
    rng = np.random.default_rng(hyper.seed)
    tr, va = _stratified_split(labels, hyper.val_fraction, rng)
    y_tr, y_va = labels[tr], labels[va]
    history: list[dict] = []

    if not freeze:
        x_tr, x_va = features[tr], features[va]
        opt = optim.make_optimizer(hyper.optimizer, model.params, hyper.lr)

        def step(batch, lam):
            opt.zero_grad()
            outs = model.forward(Tensor(x_tr[batch]), "deep")
            loss = None
            for out in outs:
                term = evidential.binary_evidence_loss_t(out.logits, y_tr[batch], lam)
                loss = term if loss is None else T.add(loss, term)
            loss.backward()
            opt.step()
            return loss.item()

        def joint_val_loss():
            with no_grad():
                outs = model.forward(Tensor(x_va), "deep")
                return sum(
                    evidential.binary_evidence_loss_t(o.logits, y_va, loss_cfg.lam).item()
                    for o in outs
                )

        _, epochs_run = _fit_loop(
            step, lambda: -joint_val_loss(), model.params, len(tr), hyper, rng, loss_cfg
        )
        acc = _deep_exit_accuracy(model, x_va, y_va)
        return [{"phase": "joint", "val_accuracy": acc, "epochs": epochs_run}]

    feats_tr = features[tr]
    feats_va = features[va]
    for stage in range(3):
        phase_params = model.subset(model.param_names_by_stage(stage))
        opt = optim.make_optimizer(hyper.optimizer, phase_params, hyper.lr)

        def step(batch, lam, _stage=stage, _x=feats_tr, _y=y_tr):
            opt.zero_grad()
            out = model.stage_forward(Tensor(_x[batch]), _stage)
            loss = evidential.binary_evidence_loss_t(out.logits, _y[batch], lam)
            loss.backward()
            opt.step()
            return loss.item()

        def val_score(_stage=stage, _x=feats_va, _y=y_va):
            return -_stage_val_loss(model, _stage, _x, _y, loss_cfg.lam)

        try:
            _, epochs_run = _fit_loop(
                step, val_score, phase_params, len(tr), hyper, rng, loss_cfg
            )
        except (TrainingDiverged, FloatingPointError) as exc:
            raise TrainingDiverged(f"phase {stage}: {exc}") from exc
        with no_grad():
            out = model.stage_forward(Tensor(feats_va), stage)
        acc = _pooled_accuracy_from_p(out.prediction()["p"], y_va)
        history.append({"phase": stage, "val_accuracy": acc, "epochs": epochs_run})
        if stage < 2:
            with no_grad():
                feats_tr = model.stage_forward(Tensor(feats_tr), stage).features.data
                feats_va = model.stage_forward(Tensor(feats_va), stage).features.data
    return history


def _train_softmax(
    cfg: BackboneConfig, features: np.ndarray, labels: np.ndarray, hyper: Hyper
) -> tuple[CascadeModel, float]:
    model = build_model(cfg, seed=hyper.seed, head_kind="softmax")
    rng = np.random.default_rng(hyper.seed)
    tr, va = _stratified_split(labels, hyper.val_fraction, rng)
    x_tr, y_tr = features[tr], labels[tr]
    x_va, y_va = features[va], labels[va]
    opt = optim.make_optimizer(hyper.optimizer, model.params, hyper.lr)

    def step(batch, lam):
        del lam  # no entropy term for the point-prediction baseline
        opt.zero_grad()
        probs = model.forward_softmax(Tensor(x_tr[batch]))
        onehot = y_tr[batch].astype(probs.dtype)
        p = T.clip(probs, evidential.PROB_EPS, 1.0 - evidential.PROB_EPS)
        loss = T.tensor_mean(T.mul(T.tensor_sum(T.mul(onehot, T.log(p)), axis=-1), -1.0))
        loss.backward()
        opt.step()
        return loss.item()

    def val_score():
        with no_grad():
            probs = model.forward_softmax(Tensor(x_va)).data
        p = np.maximum(probs[np.arange(len(y_va)), y_va.argmax(axis=1)], evidential.PROB_EPS)
        return float(np.log(p).mean())  # negative CE, higher is better

    _, _ = _fit_loop(step, val_score, model.params, len(tr), hyper, rng, LossConfig(lam=0.0))
    with no_grad():
        acc = _pooled_accuracy_from_p(model.forward_softmax(Tensor(x_va)).data, y_va)
    return model, acc


def train_baselines(
    kind: str,
    cfg: BackboneConfig,
    features: np.ndarray,
    labels: np.ndarray,
    hyper: Hyper,
    ensemble_size: int = 5,
    jitter_sigma: float = 0.03,
    jitter_copies: int = 5,
) -> BaselineBundle:
    """Point-prediction baselines over the same backbone.

    softmax_single: deep-only backbone with one C-way softmax head.
    deep_ensemble: ensemble_size such models with seeds seed..seed+4.
    input_aug: softmax_single plus a test-time jitter configuration.
    """
    if kind == "softmax_single":
        m, _ = _train_softmax(cfg, features, labels, hyper)
        return BaselineBundle(kind=kind, models=[m])
    if kind == "deep_ensemble":
        models = []
        for i in range(ensemble_size):
            m, _ = _train_softmax(cfg, features, labels, replace(hyper, seed=hyper.seed + i))
            models.append(m)
        return BaselineBundle(kind=kind, models=models)
    if kind == "input_aug":
        m, _ = _train_softmax(cfg, features, labels, hyper)
        augment = {"n_copies": jitter_copies, "sigma": jitter_sigma}
        m.extras["augment"] = augment
        return BaselineBundle(kind=kind, models=[m], augment=augment)
    raise ValueError(f"unknown baseline kind {kind!r}")
