import numpy as np
import pytest
from dataclasses import replace

from dgap import train as tr
from dgap.augment import AugmentationConfig
from dgap.data import DatasetBundle, Split
from dgap.models import ModelSpec, evaluate, init_model


def tiny_cfg(**kw):
    base = dict(pretrain_epochs=2, probe_epochs=2, finetune_epochs=2, batch_size=8, lr_pretrain=0.02, clip_norm=2.0)
    base.update(kw)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="module")
def spec16(small_bundle):
    return ModelSpec("tiny_cnn", (3, 16, 16), 3, (4, 6))


def blob_bundle(n=60, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    x = np.clip(0.5 + (2 * y[:, None, None, None] - 1) * 0.2 + 0.05 * rng.standard_normal((n, 1, 4, 4)), 0, 1)
    split = Split(x, y, np.zeros(n, dtype=np.int64))
    return DatasetBundle(split, split, split, split, (0,), (1,), None)


def test_zero_epochs_returns_same_state(small_bundle, spec16):
    s = init_model(spec16, 0)
    out = tr.erm_train(s, small_bundle, tiny_cfg(pretrain_epochs=0))
    assert out.equals(s) and out is not s


def test_separable_toy_reaches_high_accuracy():
    b = blob_bundle()
    s = init_model(ModelSpec("mlp", (1, 4, 4), 2, (8,), input_offset=0.5), 0)
    s = tr.erm_train(s, b, tr.TrainConfig(batch_size=16, lr_pretrain=0.05), epochs=50)
    assert evaluate(s, b.train.images, b.train.labels).accuracy >= 0.99


def test_erm_deterministic(small_bundle, spec16):
    a = tr.erm_train(init_model(spec16, 1), small_bundle, tiny_cfg(seed=3))
    b = tr.erm_train(init_model(spec16, 1), small_bundle, tiny_cfg(seed=3))
    assert a.equals(b)
    c = tr.erm_train(init_model(spec16, 1), small_bundle, tiny_cfg(seed=4))
    assert not a.equals(c)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_epoch(small_bundle, spec16):
    cfg = tiny_cfg(lr_pretrain=1e300, clip_norm=0.0, pretrain_epochs=3)
    with pytest.raises(tr.TrainingError, match="epoch"):
        tr.erm_train(init_model(spec16, 0), small_bundle, cfg)


def test_linear_probe_freezes_encoder(small_bundle, spec16):
    cfg = tiny_cfg()
    s0, _ = tr.pretrain(init_model(spec16, 0), small_bundle, cfg)
    s1, _ = tr.linear_probe(s0, small_bundle, cfg)
    for k in s0.encoder_names():
        assert s1.params[k].tobytes() == s0.params[k].tobytes()
    assert any(not np.array_equal(s1.params[k], s0.params[k]) for k in s0.head)


def test_lp_ft_stages(small_bundle, spec16):
    cfg = tiny_cfg()
    final, stages = tr.lp_ft(init_model(spec16, 0), small_bundle, cfg, return_stages=True)
    s0, s1 = stages["pretrain"][0], stages["probe"][0]
    assert all(s1.params[k].tobytes() == s0.params[k].tobytes() for k in s0.encoder_names())
    assert final.equals(stages["finetune"][0])
    assert len(stages["finetune"][1]) == cfg.finetune_epochs


def test_degenerate_finetune_matches_plain(small_bundle, spec16):
    cfg = tiny_cfg()
    s0, _ = tr.pretrain(init_model(spec16, 0), small_bundle, cfg)
    s1, _ = tr.linear_probe(s0, small_bundle, cfg)
    for aug_cfg in (replace(cfg, augment=AugmentationConfig(variant="none")), replace(cfg, augmented_fraction=0.0)):
        s2, _ = tr.finetune(s1, small_bundle, aug_cfg)
        plain = tr.erm_train(s1, small_bundle, cfg, epochs=cfg.finetune_epochs, lr=cfg.lr_finetune, stage="finetune")
        assert s2.equals(plain)


def test_augmented_training_degenerate_cases(small_bundle, spec16):
    cfg = tiny_cfg()
    s = init_model(spec16, 2)
    plain = tr.erm_train(s, small_bundle, cfg, epochs=2, lr=0.01)
    for c in (replace(cfg, augmented_fraction=0.0), replace(cfg, augment=AugmentationConfig(variant="none"))):
        assert tr.train_with_augmentation(s, small_bundle, c, epochs=2, lr=0.01).equals(plain)
    a = tr.train_with_augmentation(s, small_bundle, cfg, epochs=1)
    b = tr.train_with_augmentation(s, small_bundle, cfg, epochs=1)
    assert a.equals(b) and not a.equals(s)
    ma = evaluate(a, small_bundle.ood_test.images, small_bundle.ood_test.labels)
    mb = evaluate(b, small_bundle.ood_test.images, small_bundle.ood_test.labels)
    assert ma == mb


def test_augmenter_replaces_requested_fraction(small_bundle, spec16):
    aug = tr.Augmenter(small_bundle, AugmentationConfig(variant="pixel_only", lambda1_max=1.0), 0.5, "da")
    idx = np.arange(8)
    x, y = small_bundle.train.images[idx], small_bundle.train.labels[idx]
    out = aug(init_model(spec16, 0), idx, x, y, np.random.default_rng(0))
    changed = ~np.all(out == x, axis=(1, 2, 3))
    assert changed.sum() == 4


def test_ablation_rows_and_order_isolation(small_bundle, spec16):
    cfg = tiny_cfg(pretrain_epochs=1, probe_epochs=1, finetune_epochs=1)
    recs = tr.run_ablation(small_bundle, cfg, [1, 2], spec16)
    assert len(recs) == 10
    assert sorted({r.variant for r in recs}) == sorted(tr.ABLATION_ARMS)
    reversed_arms = tr.run_ablation(small_bundle, cfg, [2, 1], spec16, arms=tuple(reversed(tr.ABLATION_ARMS)))
    key = lambda r: (r.variant, r.seed)
    for a, b in zip(sorted(recs, key=key), sorted(reversed_arms, key=key)):
        assert a.run_id == b.run_id and a.losses == b.losses and a.ood_metrics == b.ood_metrics
    summary = tr.summarize(recs)
    for arm in tr.ABLATION_ARMS:
        vals = [r.ood_metrics.accuracy for r in recs if r.variant == arm]
        assert summary[arm]["ood_accuracy"] == (pytest.approx(np.mean(vals)), pytest.approx(np.std(vals)))


def test_ablation_parallel_matches_serial(small_bundle, spec16):
    cfg = tiny_cfg(pretrain_epochs=1, probe_epochs=1, finetune_epochs=1)
    serial = tr.run_ablation(small_bundle, cfg, [0, 1], spec16, arms=("lp_ft", "full"))
    parallel = tr.run_ablation(small_bundle, cfg, [0, 1], spec16, arms=("lp_ft", "full"), jobs=2)
    assert [(r.run_id, r.losses, r.ood_metrics) for r in serial] == [(r.run_id, r.losses, r.ood_metrics) for r in parallel]


def test_ablation_needs_seeds(small_bundle):
    with pytest.raises(ValueError):
        tr.run_ablation(small_bundle, tiny_cfg(), [])


def test_smoothed_tail():
    assert tr.smoothed_tail_nonincreasing(np.linspace(2, 0.1, 20))
    assert not tr.smoothed_tail_nonincreasing(np.r_[np.linspace(2, 0.1, 10), np.linspace(0.1, 1.0, 10)])


@pytest.mark.parametrize("kw", [dict(lr_probe=0), dict(finetune_epochs=-1), dict(augmented_fraction=1.5),
                                dict(optimizer="adam"), dict(momentum=1.0), dict(pair_mode="xx"), dict(clip_norm=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        tr.TrainConfig(**kw)


@pytest.mark.slow
def test_full_beats_source_only_model(default_ablation):
    records, _ = default_ablation
    full = [r for r in records if r.variant == "full"]
    assert np.mean([r.ood_metrics.accuracy for r in full]) > np.mean([r.pretrain_ood.accuracy for r in full])


@pytest.mark.slow
@pytest.mark.parametrize("stage", ["pretrain", "finetune"])
def test_smoothed_loss_settles(default_ablation, stage):
    records, _ = default_ablation
    bad = [(r.variant, r.seed) for r in records
           if not tr.smoothed_tail_nonincreasing(r.stage_losses[stage], window=3, tol=0.01)]
    assert not bad
