import math
from dataclasses import replace

import numpy as np
import pytest

from attrda.data import SOURCE, TARGET, Dataset, GeneratorConfig, _stream, generate
from attrda.errors import ConfigError, ContractError, NumericError
from attrda.losses import LossWeights
from attrda.model import ModelConfig, load_checkpoint
from attrda.schema import factorial_schema
from attrda.train import MODES, TrainConfig, TrainView, compose_batch, make_split, mode_weights, train

from hygiene import TrackedArray, forbidden_reads, instrument


def with_target_counts(schema, counts, dims=3):
    return generate(GeneratorConfig(schema, dims=dims, source_counts=2, target_counts=counts))


@pytest.fixture
def four_class():
    return factorial_schema({"a": 2, "b": 2})


@pytest.fixture
def tiny_data(small_schema):
    return generate(GeneratorConfig(small_schema, dims=8, source_counts=6, target_counts=4, seed=1))


@pytest.fixture
def tiny_model(small_schema):
    return ModelConfig.for_schema(small_schema, 8, hidden=(16,), feature_dim=8, domain_hidden=8)


# -- split -------------------------------------------------------------------

def test_split_by_target_count(four_class):
    plan = make_split(with_target_counts(four_class, [10, 9, 8, 7]), "semisup")
    assert plan.labeled_classes == (0, 1) and plan.heldout_classes == (2, 3)


def test_split_ties_by_class_id(four_class):
    plan = make_split(with_target_counts(four_class, 5), "semisup")
    assert plan.labeled_classes == (0, 1)
    plan = make_split(with_target_counts(four_class, [1, 4, 4, 9]), "semisup")
    assert plan.labeled_classes == (1, 3)


def test_split_odd_k_labels_ceil_half():
    schema = factorial_schema({"a": 5})
    plan = make_split(with_target_counts(schema, [1, 2, 3, 4, 5]), "semisup")
    assert plan.labeled_classes == (2, 3, 4) and plan.heldout_classes == (0, 1)


def test_split_visibility(four_class):
    ds = with_target_counts(four_class, [3, 2, 2, 1])
    tgt = ds.domain == TARGET
    unsup = make_split(ds, "unsup")
    assert unsup.n_target_labeled == len(ds.indices(SOURCE)) and not unsup.visible[tgt].any()
    full = make_split(ds, "full")
    assert full.visible.all() and full.heldout_classes == ()
    semi = make_split(ds, "semisup")
    assert set(semi.labeled_classes) | set(semi.heldout_classes) == {0, 1, 2, 3}
    assert not set(semi.labeled_classes) & set(semi.heldout_classes)
    held = tgt & np.isin(ds.labels, semi.heldout_classes)
    assert not semi.visible[held].any() and semi.visible[tgt & ~held].all()


def test_view_hides_labels(four_class):
    ds = with_target_counts(four_class, [3, 2, 2, 1])
    view = TrainView(ds, make_split(ds, "unsup"))
    tgt = ds.indices(TARGET)
    assert (view.labels(tgt) == -1).all() and (view.attr_labels(tgt) == -1).all()
    src = ds.indices(SOURCE)
    np.testing.assert_array_equal(view.labels(src), ds.labels[src])
    # a mode that ignores target labels hides them even in the full setting
    view = TrainView(ds, make_split(ds, "full"), target_labels=False)
    assert (view.labels(tgt) == -1).all()


# -- batches -----------------------------------------------------------------

def test_batch_halves(tiny_data):
    view = TrainView(tiny_data, make_split(tiny_data, "unsup"))
    b = compose_batch(view, 8, np.random.default_rng(0))
    assert b.domain.tolist() == [SOURCE] * 4 + [TARGET] * 4
    assert (tiny_data.domain[b.index] == b.domain).all()
    np.testing.assert_array_equal(b.features, tiny_data.features[b.index])
    with pytest.raises(ConfigError):
        compose_batch(view, 7, np.random.default_rng(0))


def test_batch_deterministic(tiny_data):
    view = TrainView(tiny_data, make_split(tiny_data, "semisup"))
    a = compose_batch(view, 16, np.random.default_rng(5))
    b = compose_batch(view, 16, np.random.default_rng(5))
    assert a.index.tolist() == b.index.tolist() and a.labels.tolist() == b.labels.tolist()


def test_batch_source_sampling_uniform(tiny_data):
    view = TrainView(tiny_data, make_split(tiny_data, "unsup"))
    rng = np.random.default_rng(11)
    src = view.source_idx
    counts = np.zeros(len(tiny_data), dtype=np.int64)
    n_batches, half = 10_000, 4
    for _ in range(n_batches):
        np.add.at(counts, compose_batch(view, 2 * half, rng).index, 1)
    n, p = n_batches * half, 1 / len(src)
    sigma = math.sqrt(n * p * (1 - p))
    assert np.abs(counts[src] - n * p).max() <= 3 * sigma + 1
    tgt = view.target_idx
    assert counts[tgt].sum() == n and (counts[tgt] > 0).all()


def test_batch_needs_both_domains(small_schema):
    ds = generate(GeneratorConfig(small_schema, dims=3, source_counts=2, target_counts=0))
    with pytest.raises(ContractError):
        compose_batch(TrainView(ds, make_split(ds, "unsup")), 4, np.random.default_rng(0))


# -- modes and config --------------------------------------------------------

def test_mode_matrix():
    base = LossWeights()
    src = mode_weights("source-only", base)
    assert src.class_softmax == 1 and not any(
        [src.attribute_softmax, src.consistency, src.confusion, src.class_soft, src.attribute_soft])
    full = mode_weights("dc-att-acl", base)
    assert full == base
    dc = mode_weights("dc", base)
    assert dc.confusion and dc.class_soft and not dc.attribute_soft and not dc.attribute_softmax
    acl = mode_weights("source-att-acl", base)
    assert acl.consistency and acl.attribute_softmax and not acl.confusion
    # every mode maps to a distinct weight configuration
    assert len({repr(mode_weights(m, base)) for m in MODES}) == len(MODES) - 1  # source-only / S+T share weights
    assert len(MODES) == 6


def test_train_config_validation():
    for bad in (dict(batch_size=3), dict(batch_size=0), dict(learning_rate=-1.0), dict(momentum=1.0),
                dict(mode="nope"), dict(setting="half"), dict(refresh_epochs=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


# -- training ----------------------------------------------------------------

def test_zero_learning_rate_keeps_params(tiny_data, tiny_model):
    res = train(tiny_data, tiny_model, TrainConfig(learning_rate=0.0, steps=20, batch_size=8, setting="semisup"))
    assert res.params.equal(res.initial)
    assert len(res.log) == 20


def test_source_only_loss_decreases():
    """Mean L_C over steps 90-99 is below steps 0-9, averaged over 3 seeds."""
    schema = factorial_schema({"make": 4, "body": 3, "trim": 2})
    drops = []
    for seed in range(3):
        ds = generate(GeneratorConfig(schema, seed=seed))
        mc = ModelConfig.for_schema(schema, ds.features.shape[1])
        res = train(ds, mc, TrainConfig(mode="source-only", steps=100, seed=seed))
        lc = [r["L_C"] for r in res.log]
        assert all(r["L_a"] == [None, None, None] and r["L_conf_cls"] is None for r in res.log)
        drops.append(np.mean(lc[:10]) - np.mean(lc[-10:]))
    assert np.mean(drops) > 0


def test_training_is_deterministic(tmp_path, tiny_data, tiny_model):
    cfg = TrainConfig(learning_rate=0.01, steps=30, batch_size=8, setting="semisup", checkpoint_every=10)
    train(tiny_data, tiny_model, cfg, out_dir=tmp_path / "a")
    train(tiny_data, tiny_model, cfg, out_dir=tmp_path / "b")
    for name in ("metrics.jsonl", "checkpoint.txt", "checkpoint-20.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len((tmp_path / "a" / "metrics.jsonl").read_text().splitlines()) == 30
    assert load_checkpoint(tmp_path / "a" / "checkpoint.txt").config.seed == 0


def test_seed_changes_run(tiny_data, tiny_model):
    a = train(tiny_data, tiny_model, TrainConfig(learning_rate=0.01, steps=5, batch_size=8, seed=0))
    b = train(tiny_data, tiny_model, TrainConfig(learning_rate=0.01, steps=5, batch_size=8, seed=1))
    assert not a.params.equal(b.params)


def test_log_records_every_term(tiny_data, tiny_model):
    res = train(tiny_data, tiny_model, TrainConfig(learning_rate=0.01, steps=3, batch_size=8, setting="semisup"))
    rec = res.log[0]
    assert set(rec) >= {"step", "L_C", "L_a", "L_con", "L_conf_cls", "L_conf_confusion", "L_csoft", "L_asoft",
                        "total"}
    assert "wall_time" not in rec
    res = train(tiny_data, tiny_model, TrainConfig(steps=1, batch_size=8, log_wall_time=True))
    assert res.log[0]["wall_time"] >= 0


def test_full_setting_trains(tiny_data, tiny_model):
    res = train(tiny_data, tiny_model, TrainConfig(learning_rate=0.01, steps=5, batch_size=8, setting="full"))
    assert res.log[-1]["L_csoft"] is not None


def test_divergence_reports_step(tiny_data, tiny_model):
    tiny_data.features[:] = 1e308  # activations overflow on the first forward pass
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericError, match="divergence at step 0"):
            train(tiny_data, tiny_model, TrainConfig(steps=5, batch_size=8, mode="source-only"))


def test_missing_source_class_is_bank_error(small_schema, tiny_model):
    from attrda.errors import BankError
    ds = generate(GeneratorConfig(small_schema, dims=8, source_counts=[2, 2, 0, 2, 2, 2], target_counts=2))
    with pytest.raises(BankError):
        train(ds, tiny_model, TrainConfig(steps=2, batch_size=8, setting="semisup"))


# -- label hygiene -----------------------------------------------------------

def test_tracker_detects_reads(four_class):
    t = TrackedArray(np.arange(6))
    _ = t[[1, 3]]
    assert t.reads == {1, 3}
    _ = t[4:]
    assert t.reads == {1, 3, 4, 5}
    t2 = TrackedArray(np.arange(4))
    _ = t2 >= 0
    assert t2.reads == {0, 1, 2, 3}
    t3 = TrackedArray(np.zeros((3, 2)))
    _ = t3[np.array([False, True, False]), 1]
    assert t3.reads == {1}


@pytest.mark.parametrize("mode", ["dc-att-acl", "source-att-acl", "source-plus-target"])
def test_semisup_never_reads_heldout_labels(tiny_data, tiny_model, mode):
    split = make_split(tiny_data, "semisup")
    assert split.heldout_classes
    tracked = instrument(tiny_data)
    train(tiny_data, tiny_model, TrainConfig(learning_rate=0.01, steps=40, batch_size=16, setting="semisup",
                                             mode=mode), split=split)
    assert any(t.reads for t in tracked)
    assert forbidden_reads(tiny_data, split, *tracked) == 0


def test_hygiene_check_catches_a_leak(tiny_data):
    split = make_split(tiny_data, "semisup")
    tracked = instrument(tiny_data)
    _ = tiny_data.labels[tiny_data.indices(TARGET)]
    assert forbidden_reads(tiny_data, split, *tracked) > 0
