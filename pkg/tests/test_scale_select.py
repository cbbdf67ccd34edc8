import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from chanscale import netgraph as ng
from chanscale.data import SyntheticSpec, generate_planted_dataset
from chanscale.errors import ConfigError, EmptyNetworkError, ModelError
from chanscale.scale_select import (IterationRecord, SelectConfig, _iteration_seed, cumulative_keep,
                                    effective_keep, exhaustive_selection_oracle, finalize,
                                    keep_from_scaling, load_records, run_iteration, scale_select_run,
                                    threshold_channels)
from chanscale.serialize import load_model
from chanscale.trainer import TrainConfig, evaluate_split, train

from conftest import toy_model

FAST = TrainConfig(learning_rate=5e-2, batch_size=16, epochs=4, l1_lambda=1e-3, augment_probability=0.0)


@pytest.fixture(scope="module")
def small_task():
    spec = SyntheticSpec(image_size=8, plan=(6, "P", 4), informative=(0, 2), n_samples=120,
                         split_fractions=(0.5, 0.25, 0.25))
    data, model, _ = generate_planted_dataset(spec, seed=3, dtype=np.float64)
    return data, model


def pruning_config(**changes):
    base = SelectConfig(threshold=0.3, max_iterations=4, train=FAST, finalize_train=FAST)
    return replace(base, **changes)


# ---------------------------------------------------------------------------
# threshold rule


def test_threshold_examples():
    assert threshold_channels([0.005, 0.5, 1.0], 0.01) == (1, 2)
    assert threshold_channels([0.2, 0.3, 1.0], 0.01) == (0, 1, 2)
    assert threshold_channels([0.01, 0.00999], 0.01) == (0,)
    assert threshold_channels(np.float32([0.01, 0.0099]), 0.01) == (0,)
    assert threshold_channels([0.0, 0.004], 0.01) == ()
    assert threshold_channels([0.0, 0.5], 0.0) == (0, 1)


def test_select_config_validation():
    for kwargs, name in [({"threshold": 1.0}, "threshold"), ({"threshold": -0.1}, "threshold"),
                         ({"max_iterations": 0}, "max_iterations"),
                         ({"min_removed_per_iteration": -1}, "min_removed_per_iteration")]:
        with pytest.raises(ConfigError) as exc:
            SelectConfig(**kwargs)
        assert exc.value.field == name


def test_keep_from_scaling_needs_scaling(rng):
    with pytest.raises(ModelError):
        keep_from_scaling(toy_model(rng, plan=(3,)), 0.01)


def test_effective_and_cumulative_keep():
    assert effective_keep(ng.KeepSet(((0, 2), (), (1,)))).indices == ((0, 2), (), ())
    rec = lambda keep: IterationRecord(1, (), (), ng.KeepSet(keep), (), 0.5, 0.5, 0)
    records = [rec(((0, 2, 5), (1, 3, 4))), rec(((0, 2), (1,))), rec(((1,), ()))]
    assert cumulative_keep(records).indices == ((5,), ())


# ---------------------------------------------------------------------------
# iteration loop


def test_single_iteration_equals_manual_step(small_task):
    data, model = small_task
    cfg = pruning_config(max_iterations=1)
    res = scale_select_run(model, data, cfg)
    assert len(res.records) == 1
    trained, _ = train(ng.attach_scaling(model), data,
                       replace(cfg.train, rng_seed=_iteration_seed(cfg.train.rng_seed, 1)))
    keep = ng.KeepSet(tuple(threshold_channels(s, cfg.threshold) for s in ng.scaling_vectors(trained)))
    assert res.records[0].keep == keep
    assert ng.models_equal(res.scaled_model, trained)
    manual = ng.select_channels(trained, keep, seed=_iteration_seed(cfg.seed, 1))
    assert ng.models_equal(res.model.replace(metadata={}), manual.replace(metadata={}))


def test_zero_threshold_keeps_everything(small_task):
    data, model = small_task
    res = scale_select_run(model, data, pruning_config(threshold=0.0, max_iterations=3,
                                                       min_removed_per_iteration=0))
    assert len(res.records) == 3
    assert all(r.channels_after == r.channels_before == (6, 4) for r in res.records)
    # with the default floor of 1 the first empty iteration ends the run
    assert len(scale_select_run(model, data, pruning_config(threshold=0.0)).records) == 1


@pytest.mark.parametrize("seed", range(4))
def test_record_invariants(seed):
    r = np.random.default_rng(seed)
    spec = SyntheticSpec(image_size=8, plan=(int(r.integers(3, 7)), "P", int(r.integers(2, 5))),
                         informative=(0,), n_samples=96, split_fractions=(0.5, 0.25, 0.25))
    data, model, _ = generate_planted_dataset(spec, seed=seed, dtype=np.float64)
    cfg = pruning_config(threshold=float(r.uniform(0.2, 0.6)), max_iterations=5,
                         train=replace(FAST, rng_seed=seed), seed=seed)
    try:
        res = scale_select_run(model, data, cfg)
    except EmptyNetworkError:
        pytest.skip("threshold emptied the first layer")
    prev = ng.count_channels(model)
    for rec in res.records:
        assert rec.channels_before == prev
        # monotone and conserved per layer
        assert all(a <= b for a, b in zip(rec.channels_after, rec.channels_before))
        eff = effective_keep(rec.keep)
        assert eff.sizes() == rec.channels_after
        assert sum(rec.histogram) == sum(rec.channels_before)
        cascaded = False
        for l, (s, kept) in enumerate(zip(rec.scaling, eff.indices)):
            if cascaded:
                continue
            # soundness: removed channels had s < tau, kept ones s >= tau
            for i, value in enumerate(s):
                assert (value < cfg.threshold) == (i not in kept)
            cascaded = not kept
        prev = rec.channels_after
    last = res.records[-1]
    assert len(res.records) == cfg.max_iterations or last.removed < cfg.min_removed_per_iteration
    assert ng.count_channels(res.model) == tuple(c for c in last.channels_after if c)


def test_reattachment_identity(small_task):
    data, model = small_task
    res = scale_select_run(model, data, pruning_config(max_iterations=2))
    x = data.images[:10]
    reattached = ng.attach_scaling(res.model)
    np.testing.assert_array_equal(ng.forward(reattached, x), ng.forward(res.model, x))


def test_cold_head_option_reinitializes(small_task):
    data, model = small_task
    cfg = pruning_config(max_iterations=1, warm_start_head=False, train=replace(FAST, epochs=0))
    _, scaled, _, _ = run_iteration(model, data, cfg, 1)
    assert not np.array_equal(scaled.head.weight, model.head.weight)
    cfg = replace(cfg, warm_start_head=True)
    _, scaled, _, _ = run_iteration(model, data, cfg, 1)
    np.testing.assert_array_equal(scaled.head.weight, model.head.weight)


def test_scale_select_rejects_scaled_input(small_task):
    data, model = small_task
    with pytest.raises(ModelError):
        scale_select_run(ng.attach_scaling(model), data, pruning_config())


def test_planted_informative_channel_survives():
    spec = SyntheticSpec(image_size=16, plan=(8,), informative=(1, 6), n_samples=320,
                         split_fractions=(0.5, 0.25, 0.25))
    data, model, _ = generate_planted_dataset(spec, seed=0)
    train_cfg = TrainConfig(learning_rate=1e-2, epochs=30, l1_lambda=1e-5, augment_probability=0.0)
    res = scale_select_run(model, data, SelectConfig(max_iterations=10, train=train_cfg))
    kept = cumulative_keep(res.records).indices[0]
    assert {1, 6} <= set(kept) and len(kept) <= 3


# ---------------------------------------------------------------------------
# finalization


def test_finalize_unit_scaling_keeps_conv_bytes(small_task):
    data, model = small_task
    cfg = pruning_config(finalize_train=replace(FAST, epochs=2))
    final, history = finalize(ng.attach_scaling(model), data, cfg)
    assert not final.has_scaling and len(history) == 2
    for a, b in zip(final.convs, model.convs):
        assert a.kernel.tobytes() == b.kernel.tobytes() and a.bias.tobytes() == b.bias.tobytes()
        assert a.frozen
    assert ng.count_parameters(final)["trainable"] == final.head.weight.size + final.head.bias.size


def test_finalize_planted_zeros_equivalence(rng):
    for _ in range(5):
        scaled = toy_model(rng, plan=(5, ng.POOL, 4), scaling=True, s_range=(0.2, 1.0))
        layers = list(scaled.layers)
        for i, layer in enumerate(layers):
            if isinstance(layer, ng.Scaling):
                s = layer.s.copy()
                s[rng.choice(s.size, 2, replace=False)] = 0.0
                layers[i] = ng.Scaling(s)
        scaled = scaled.replace(layers=tuple(layers))
        x = rng.standard_normal((100,) + scaled.input_shape)
        # zero retraining epochs isolates the fold step; no data is touched
        final, _ = finalize(scaled, None, SelectConfig(finalize_train=replace(FAST, epochs=0)))
        got, want = ng.forward(final, x), ng.forward(scaled, x)
        assert np.max(np.abs(got - want)) <= 1e-6 * max(1.0, np.max(np.abs(want)))
        assert ng.count_parameters(final)["total"] < ng.count_parameters(ng.strip_scaling(scaled))["total"]


def test_pruned_run_reduces_parameters(small_task):
    data, model = small_task
    res = scale_select_run(model, data, pruning_config())
    final, _ = finalize(res.scaled_model, data, pruning_config())
    if any(r.removed for r in res.records):
        assert ng.count_parameters(final)["total"] < ng.count_parameters(model)["total"]


# ---------------------------------------------------------------------------
# oracle


def test_oracle_single_channel_two_cases():
    spec = SyntheticSpec(image_size=12, plan=(1,), informative=(0,), n_samples=120,
                         split_fractions=(0.5, 0.25, 0.25))
    data, model, _ = generate_planted_dataset(spec, seed=1)
    cfg = TrainConfig(learning_rate=1e-2, epochs=20, augment_probability=0.0)
    res = exhaustive_selection_oracle(model, data, cfg)
    assert set(res.scores) == {((),), ((0,),)}
    assert res.scores[((),)] == 0.5
    assert (res.keep.indices == ((0,),)) == (res.scores[((0,),)] > 0.5)
    assert res.keep.indices == ((0,),)


def test_oracle_finds_planted_channel():
    spec = SyntheticSpec(image_size=16, plan=(4,), informative=(2,), n_samples=200,
                         split_fractions=(0.5, 0.25, 0.25))
    data, model, _ = generate_planted_dataset(spec, seed=0)
    res = exhaustive_selection_oracle(model, data, TrainConfig(learning_rate=1e-2, epochs=20,
                                                               augment_probability=0.0))
    assert len(res.scores) == 16
    assert 2 in res.keep.indices[0]
    assert res.auc >= max(res.scores.values()) - 1e-15


def test_oracle_cap(rng):
    with pytest.raises(ModelError, match="capped"):
        exhaustive_selection_oracle(toy_model(rng, plan=(7, 6)), None, FAST)


# ---------------------------------------------------------------------------
# persistence and resume


def test_outputs_and_resume(tmp_path, small_task):
    data, model = small_task
    cfg = pruning_config(threshold=0.2, min_removed_per_iteration=0, max_iterations=3)
    full = scale_select_run(model, data, cfg, out_dir=tmp_path / "full")
    with open(tmp_path / "full" / "reports" / "iterations.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["iteration", "total_channels", "auc_roc", "auc_pr", "trainable_params"]
    assert len(rows) == 4 and [int(r[1]) for r in rows[1:]] == [r.total_channels for r in full.records]
    with open(tmp_path / "full" / "reports" / "histograms" / "iter_001.csv") as f:
        hist = list(csv.reader(f))
    assert hist[0] == ["bin_low", "bin_high", "count"] and len(hist) == 101
    keep = json.loads((tmp_path / "full" / "reports" / "keepsets" / "iter_002.json").read_text())
    assert keep["keep"] == [list(k) for k in full.records[1].keep.indices]
    assert load_records(tmp_path / "full") == full.records
    assert ng.models_equal(load_model(tmp_path / "full" / "checkpoints" / "iter_003_scaled.cssm"),
                           full.scaled_model)

    partial = scale_select_run(model, data, replace(cfg, max_iterations=2), out_dir=tmp_path / "part")
    assert len(partial.records) == 2
    resumed = scale_select_run(model, data, cfg, out_dir=tmp_path / "part", resume=True)
    assert resumed.records == full.records
    assert ng.models_equal(resumed.model, full.model)
    assert ng.models_equal(resumed.scaled_model, full.scaled_model)


def test_record_round_trip(small_task):
    data, model = small_task
    rec = scale_select_run(model, data, pruning_config(max_iterations=1)).records[0]
    assert IterationRecord.from_dict(json.loads(json.dumps(rec.to_dict()))) == rec
    assert rec.trainable_params == sum(ng.count_channels(model)) + model.head.weight.size + 1


def test_validation_metrics_in_record(small_task):
    data, model = small_task
    res = scale_select_run(model, data, pruning_config(max_iterations=1))
    auc, ap = evaluate_split(res.scaled_model, data, "validation")
    assert res.records[0].auc_roc == auc and res.records[0].auc_pr == ap
