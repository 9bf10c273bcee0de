import numpy as np
import pytest

import evexit.training as training
from evexit.data import gen_synthetic
from evexit.evidential import LossConfig
from evexit.features import FeatureConfig, extract_mfcc_batch
from evexit.model import BackboneConfig, build_model, count_macs, serialize
from evexit.training import (
    BaselineBundle,
    Hyper,
    SearchResult,
    SearchSpace,
    TrainingDiverged,
    cascade_train,
    search,
    train_baselines,
    train_candidate,
    write_search_table,
)


def small_cfg(feats, n_events, channels=8, blocks=3):
    return BackboneConfig(
        channels=channels,
        blocks=blocks,
        input_shape=feats.shape[-3:],
        n_events=n_events,
        allow_custom=True,
    )


def test_candidate_reaches_high_accuracy_on_separable_data(tiny_dataset, tiny_features):
    _, train_feats, _ = tiny_features
    cfg = small_cfg(train_feats, tiny_dataset.n_events)
    _, acc = train_candidate(
        cfg, train_feats, tiny_dataset.labels["train"], Hyper(epochs=20, seed=0)
    )
    assert acc >= 0.95


def test_candidate_deterministic_under_seed(tiny_dataset, tiny_features):
    _, train_feats, _ = tiny_features
    cfg = small_cfg(train_feats, tiny_dataset.n_events)
    hyper = Hyper(epochs=4, seed=9)
    m1, a1 = train_candidate(cfg, train_feats, tiny_dataset.labels["train"], hyper)
    m2, a2 = train_candidate(cfg, train_feats, tiny_dataset.labels["train"], hyper)
    assert a1 == a2
    assert serialize(m1) == serialize(m2)


def test_candidate_trains_deep_heads_only(tiny_dataset, tiny_features):
    _, train_feats, _ = tiny_features
    cfg = small_cfg(train_feats, tiny_dataset.n_events)
    model, _ = train_candidate(cfg, train_feats, tiny_dataset.labels["train"], Hyper(epochs=2, seed=0))
    init = build_model(cfg, seed=0)
    for stage in (0, 1):
        for c in range(cfg.n_events):
            for suffix in ("w", "b"):
                name = f"heads.{stage}.{c}.{suffix}"
                np.testing.assert_array_equal(model.params[name].data, init.params[name].data)


def test_empty_training_data_errors():
    with pytest.raises(ValueError, match="empty"):
        train_candidate(
            BackboneConfig(channels=8, blocks=3, input_shape=(1, 4, 4), n_events=2, allow_custom=True),
            np.zeros((0, 1, 4, 4), dtype=np.float32),
            np.zeros((0, 2), dtype=np.int64),
            Hyper(),
        )


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------


def rigged_search(monkeypatch, accuracies, feats, labels, channels=(8, 16), ops=(3, 4)):
    table = dict(accuracies)

    def fake_train(cfg, *args, **kwargs):
        acc = table[(cfg.channels, cfg.blocks)]
        if acc is None:
            raise TrainingDiverged("rigged")
        return build_model(cfg, seed=0), acc

    monkeypatch.setattr(training, "train_candidate", fake_train)
    space = SearchSpace(channels=channels, ops=ops, allow_custom=True)
    return search(space, feats, labels, Hyper(epochs=1, seed=0))


@pytest.fixture()
def search_inputs():
    feats = np.zeros((8, 1, 6, 8), dtype=np.float32)
    labels = np.tile(np.array([[1, 0], [0, 1]]), (4, 1))
    return feats, labels


def test_constant_accuracy_prefers_smallest_macs(monkeypatch, search_inputs):
    feats, labels = search_inputs
    acc = {(8, 3): 0.8, (8, 4): 0.8, (16, 3): 0.8, (16, 4): 0.8}
    result = rigged_search(monkeypatch, acc, feats, labels)
    assert (result.best_config.channels, result.best_config.blocks) == (8, 3)
    assert len(result.rows) == 4  # exhaustive


def test_winner_matches_table_rescan(monkeypatch, search_inputs, tmp_path):
    feats, labels = search_inputs
    acc = {(8, 3): 0.55, (8, 4): 0.9, (16, 3): 0.85, (16, 4): 0.95}
    result = rigged_search(monkeypatch, acc, feats, labels)
    # independent recomputation from the persisted table
    write_search_table(result, tmp_path / "table.csv")
    rows = (tmp_path / "table.csv").read_text().splitlines()[1:]
    parsed = [r.split(",") for r in rows]
    min_macs = min(int(p[3]) for p in parsed)
    scores = [float(p[2]) / (int(p[3]) / min_macs) for p in parsed]
    best = parsed[int(np.argmax(scores))]
    assert (int(best[0]), int(best[1])) == (result.best_config.channels, result.best_config.blocks)
    for p, row in zip(parsed, result.rows):
        assert float(p[4]) == pytest.approx(row["score"], rel=1e-12)


def test_dominated_config_never_wins(monkeypatch, search_inputs):
    feats, labels = search_inputs
    base = {(8, 3): 0.7, (8, 4): 0.9, (16, 3): 0.8, (16, 4): None}
    result = rigged_search(monkeypatch, base, feats, labels)
    # (16, 4) diverged (dominated by everything); winner unchanged vs rescan
    winner = (result.best_config.channels, result.best_config.blocks)
    failed = [r for r in result.rows if r["status"] == "failed"]
    assert len(failed) == 1 and failed[0]["score"] == 0.0
    assert winner != (16, 4)


def test_blocks_denominator_literal_reading(monkeypatch, search_inputs):
    feats, labels = search_inputs

    def fake_train(cfg, *args, **kwargs):
        return build_model(cfg, seed=0), {3: 0.6, 4: 0.9}[cfg.blocks]

    monkeypatch.setattr(training, "train_candidate", fake_train)
    space = SearchSpace(channels=(8,), ops=(3, 4), allow_custom=True)
    result = search(space, feats, labels, Hyper(epochs=1, seed=0), score_denominator="blocks")
    # 0.6/3 = 0.2 < 0.9/4 = 0.225
    assert result.best_config.blocks == 4


def test_all_failed_raises(monkeypatch, search_inputs):
    feats, labels = search_inputs
    acc = {(8, 3): None, (8, 4): None, (16, 3): None, (16, 4): None}
    with pytest.raises(TrainingDiverged, match="all search candidates"):
        rigged_search(monkeypatch, acc, feats, labels)


def test_search_space_validation():
    with pytest.raises(ValueError, match="nonempty"):
        SearchSpace(channels=(), ops=(3,))
    with pytest.raises(ValueError, match="unknown score denominator"):
        search(
            SearchSpace(channels=(8,), ops=(3,), allow_custom=True),
            np.zeros((2, 1, 4, 4), dtype=np.float32),
            np.array([[1, 0], [0, 1]]),
            Hyper(),
            score_denominator="flops",
        )


def test_search_real_tiny_run_matches_grid_order(tiny_dataset, tiny_features):
    _, train_feats, _ = tiny_features
    space = SearchSpace(channels=(4, 8), ops=(3,), allow_custom=True)
    result = search(
        space, train_feats, tiny_dataset.labels["train"], Hyper(epochs=2, seed=1)
    )
    assert [(r["channels"], r["ops"]) for r in result.rows] == [(4, 3), (8, 3)]
    for r in result.rows:
        cfg = BackboneConfig(
            channels=r["channels"],
            blocks=r["ops"],
            input_shape=train_feats.shape[-3:],
            n_events=2,
            allow_custom=True,
        )
        assert r["macs"] == count_macs(cfg, "deep")


# ---------------------------------------------------------------------------
# cascade training
# ---------------------------------------------------------------------------


def test_cascade_freezing_per_phase(monkeypatch, tiny_dataset, tiny_features):
    _, train_feats, _ = tiny_features
    cfg = small_cfg(train_feats, tiny_dataset.n_events)
    model = build_model(cfg, seed=0)
    phases = []
    real_fit = training._fit_loop

    def spy_fit(*args, **kwargs):
        before = {k: p.data.copy() for k, p in model.params.items()}
        out = real_fit(*args, **kwargs)
        changed = {k for k, p in model.params.items() if not np.array_equal(before[k], p.data)}
        phases.append(changed)
        return out

    monkeypatch.setattr(training, "_fit_loop", spy_fit)
    cascade_train(model, train_feats, tiny_dataset.labels["train"], Hyper(epochs=2, seed=0), LossConfig())
    assert len(phases) == 3
    for stage, changed in enumerate(phases):
        allowed = set(model.param_names_by_stage(stage))
        assert changed <= allowed
        assert changed  # the active phase really trains


def test_cascade_history_and_early_stop_with_frozen_lr():
    ds = gen_synthetic(2, 12, seed=5, duration=0.25, n_test=0)
    feats = extract_mfcc_batch(ds.signals["train"], FeatureConfig())
    cfg = small_cfg(feats, 2)
    model = build_model(cfg, seed=0)
    hist = cascade_train(
        model, feats, ds.labels["train"], Hyper(epochs=30, patience=2, lr=1e-12, seed=0), LossConfig()
    )
    # lr ~ 0: no improvement after the first eval, so patience + 1 epochs per phase
    assert [h["epochs"] for h in hist] == [3, 3, 3]


def test_cascade_single_event_degenerate(tiny_dataset, tiny_features):
    _, train_feats, _ = tiny_features
    cfg = small_cfg(train_feats, n_events=1)
    labels = tiny_dataset.labels["train"][:, :1]
    model = build_model(cfg, seed=0)
    hist = cascade_train(model, train_feats, labels, Hyper(epochs=2, seed=0), LossConfig())
    assert len(hist) == 3
    heads = [n for n in model.params if n.startswith("heads.")]
    assert len(heads) == 3 * 2  # one head (w, b) per stage


def test_cascade_nan_aborts_with_phase_index(tiny_dataset, tiny_features):
    _, train_feats, _ = tiny_features
    cfg = small_cfg(train_feats, tiny_dataset.n_events)
    model = build_model(cfg, seed=0)
    model.params["stem.w"].data[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="phase 0"):
        cascade_train(model, train_feats, tiny_dataset.labels["train"], Hyper(epochs=2, seed=0), LossConfig())


def test_cascade_no_freeze_joint(tiny_dataset, tiny_features):
    _, train_feats, _ = tiny_features
    cfg = small_cfg(train_feats, tiny_dataset.n_events)
    model = build_model(cfg, seed=0)
    init = {k: p.data.copy() for k, p in model.params.items()}
    hist = cascade_train(
        model, train_feats, tiny_dataset.labels["train"], Hyper(epochs=2, seed=0), LossConfig(), freeze=False
    )
    assert hist[0]["phase"] == "joint"
    changed = [k for k, v in init.items() if not np.array_equal(v, model.params[k].data)]
    # joint mode updates all stages at once (every conv participates)
    assert any(k.startswith("blocks.0") for k in changed)
    assert any(k.startswith("blocks.2") for k in changed)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def test_ensemble_params_exactly_five_times_single(tiny_dataset, tiny_features):
    _, train_feats, _ = tiny_features
    cfg = small_cfg(train_feats, tiny_dataset.n_events)
    hyper = Hyper(epochs=1, seed=0)
    single = train_baselines("softmax_single", cfg, train_feats, tiny_dataset.labels["train"], hyper)
    ens = train_baselines("deep_ensemble", cfg, train_feats, tiny_dataset.labels["train"], hyper)
    n_single = sum(p.size for p in single.models[0].params.values())
    n_ens = sum(sum(p.size for p in m.params.values()) for m in ens.models)
    assert n_ens == 5 * n_single
    seeds_differ = any(
        not np.array_equal(ens.models[0].params["stem.w"].data, m.params["stem.w"].data)
        for m in ens.models[1:]
    )
    assert seeds_differ


def test_input_aug_bundle_stores_config(tiny_dataset, tiny_features):
    _, train_feats, _ = tiny_features
    cfg = small_cfg(train_feats, tiny_dataset.n_events)
    bundle = train_baselines(
        "input_aug", cfg, train_feats, tiny_dataset.labels["train"], Hyper(epochs=1, seed=0)
    )
    assert bundle.augment == {"n_copies": 5, "sigma": 0.03}
    assert bundle.models[0].extras["augment"] == bundle.augment


def test_unknown_baseline_kind():
    with pytest.raises(ValueError, match="unknown baseline"):
        train_baselines("mcdp", None, None, None, Hyper())
