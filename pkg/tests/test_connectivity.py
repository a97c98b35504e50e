import numpy as np
import pytest
from hypothesis import given, strategies as st

from dgap import connectivity as cn
from dgap.augment import AugmentationConfig
from dgap.data import Split

FAST = cn.ConnectivityConfig(probe_epochs=8, probe_hidden=(4, 6), pairs_per_category=2)


def noise_split(n_per, shifts, size=8, seed=0):
    """One group per (label, domain) key in ``shifts``; images are N(0.5 + shift, 0.1) clipped."""
    rng = np.random.default_rng(seed)
    xs, ys, ds = [], [], []
    for (y, d), shift in shifts.items():
        xs.append(np.clip(0.5 + shift + 0.1 * rng.standard_normal((n_per, 1, size, size)), 0, 1))
        ys.append(np.full(n_per, y))
        ds.append(np.full(n_per, d))
    return Split(np.concatenate(xs), np.concatenate(ys).astype(np.int64), np.concatenate(ds).astype(np.int64))


@given(st.integers(0, 3), st.integers(0, 3), st.integers(0, 3), st.integers(0, 3))
def test_categories_cover_all_tuples(y1, d1, y2, d2):
    c = cn.categorize(y1, d1, y2, d2)
    assert c == {(True, True): "rho", (True, False): "alpha", (False, True): "beta", (False, False): "gamma"}[
        (y1 == y2, d1 == d2)]
    assert cn.categorize(y2, d2, y1, d1) == c


def test_pair_dataset_contents(small_bundle):
    split = small_bundle.train
    pair = cn.ClassDomainPair(0, 0, 1, 2)
    data = cn.build_pair_dataset(split, pair, 0.5, seed=1)
    n_a = int(((split.labels == 0) & (split.domains == 0)).sum())
    n_b = int(((split.labels == 1) & (split.domains == 2)).sum())
    assert len(data.train_y) + len(data.test_y) == n_a + n_b
    assert (data.test_y == 0).sum() == round(0.5 * n_a) and (data.test_y == 1).sum() == round(0.5 * n_b)
    group_a = split.images[(split.labels == 0) & (split.domains == 0)]
    for img in data.train_x[data.train_y == 0]:
        assert np.any(np.all(group_a == img, axis=(1, 2, 3)))
    again = cn.build_pair_dataset(split, pair, 0.5, seed=1)
    assert np.array_equal(again.train_x, data.train_x) and np.array_equal(again.test_y, data.test_y)


def test_rho_pair_halves_one_coordinate(small_bundle):
    data = cn.build_pair_dataset(small_bundle.train, cn.ClassDomainPair(1, 1, 1, 1), 0.5, seed=0)
    assert len(data.train_y) + len(data.test_y) == int(((small_bundle.train.labels == 1) & (small_bundle.train.domains == 1)).sum())
    assert set(np.unique(data.train_y)) == {0, 1}


def test_pair_sampling_error(small_bundle):
    with pytest.raises(cn.PairSamplingError):
        cn.build_pair_dataset(small_bundle.train, cn.ClassDomainPair(0, 0, 1, 9), 0.5, seed=0)
    one_domain = small_bundle.train.subset(np.flatnonzero(small_bundle.train.domains == 0))
    with pytest.raises(cn.PairSamplingError):
        cn.select_pairs(one_domain, FAST, 0)


def test_enumerate_and_select(small_bundle):
    pools = cn.enumerate_pairs(small_bundle.train)
    # 3 classes x 4 domains = 12 coordinates
    assert len(pools["alpha"]) == 3 * 6 and len(pools["beta"]) == 4 * 3 and len(pools["gamma"]) == 6 * 6
    assert not pools["rho"]
    chosen = cn.select_pairs(small_bundle.train, FAST, 0)
    assert [p.category for p in chosen] == ["alpha"] * 2 + ["beta"] * 2 + ["gamma"] * 2
    assert chosen == cn.select_pairs(small_bundle.train, FAST, 0)


def test_identical_distributions_near_chance():
    split = noise_split(400, {(0, 0): 0.0, (1, 0): 0.0})
    data = cn.build_pair_dataset(split, cn.ClassDomainPair(0, 0, 1, 0), 0.5, seed=0)
    assert len(data.test_y) == 400
    err = cn.estimate_connectivity(data, cn.ConnectivityConfig(), seed=0)
    assert abs(err - 0.5) <= 0.1


def test_separable_groups_near_zero():
    split = noise_split(100, {(0, 0): -0.3, (1, 1): 0.3})
    data = cn.build_pair_dataset(split, cn.ClassDomainPair(0, 0, 1, 1), 0.5, seed=0)
    assert cn.estimate_connectivity(data, cn.ConnectivityConfig(), seed=0) <= 0.02


def test_identical_domains_alpha_matches_rho():
    base = noise_split(200, {(0, 0): 0.0})
    split = Split(np.concatenate([base.images, base.images]), np.zeros(400, np.int64),
                  np.r_[np.zeros(200, np.int64), np.ones(200, np.int64)])
    cfg = cn.ConnectivityConfig()
    alpha = cn.estimate_connectivity(cn.build_pair_dataset(split, cn.ClassDomainPair(0, 0, 0, 1), 0.5, 0), cfg, 0)
    rho = cn.estimate_connectivity(cn.build_pair_dataset(split, cn.ClassDomainPair(0, 0, 0, 0), 0.5, 0), cfg, 0)
    assert abs(alpha - rho) <= 0.1


@pytest.mark.parametrize("shift", [0.0, 0.03, 0.06])
def test_swap_symmetry(shift):
    split = noise_split(150, {(0, 0): 0.0, (1, 1): shift})
    pair = cn.ClassDomainPair(0, 0, 1, 1)
    cfg = cn.ConnectivityConfig()
    for s in range(2):
        a = cn.estimate_connectivity(cn.build_pair_dataset(split, pair, 0.5, s), cfg, s)
        b = cn.estimate_connectivity(cn.build_pair_dataset(split, pair.swapped(), 0.5, s), cfg, s)
        assert abs(a - b) <= 0.05


def test_swapped_pair_flips_labels_only(small_bundle):
    pair = cn.ClassDomainPair(2, 3, 0, 1)
    a = cn.build_pair_dataset(small_bundle.train, pair, 0.5, seed=4)
    b = cn.build_pair_dataset(small_bundle.train, pair.swapped(), 0.5, seed=4)
    assert np.array_equal(a.train_x, b.train_x) and np.array_equal(a.test_x, b.test_x)
    assert np.array_equal(a.train_y, 1 - b.train_y) and np.array_equal(a.test_y, 1 - b.test_y)
    assert pair.canonical() == pair.swapped().canonical() == cn.ClassDomainPair(0, 1, 2, 3)


def test_report_deterministic_and_parallel(small_bundle):
    r1 = cn.connectivity_report(small_bundle.train, FAST, seed=2)
    r2 = cn.connectivity_report(small_bundle.train, FAST, seed=2, jobs=2)
    assert r1.means == r2.means and r1.pair_values == r2.pair_values
    assert r1.counts == {"alpha": 2, "beta": 2, "gamma": 2}
    for c, v in r1.means.items():
        assert v == pytest.approx(np.mean([x for p, x in r1.pair_values if p.category == c]))
        assert 0.0 <= v <= 1.0


def test_ratios_withheld_when_gamma_zero():
    split = noise_split(40, {(0, 0): -0.4, (1, 0): -0.1, (0, 1): 0.1, (1, 1): 0.4})
    rep = cn.connectivity_report(split, cn.ConnectivityConfig(probe_hidden=(4, 6), probe_epochs=20), seed=0)
    assert rep.means["gamma"] == 0.0
    assert rep.ratios_withheld and not rep.ratios


def test_augment_split_shapes_and_determinism(small_bundle):
    aug = AugmentationConfig(variant="pixel_only", lambda1_max=1.0)
    a = cn.augment_split(small_bundle.train, small_bundle, None, aug, "da", seed=0)
    b = cn.augment_split(small_bundle.train, small_bundle, None, aug, "da", seed=0)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, small_bundle.train.labels)
    assert not np.array_equal(a.images, small_bundle.train.images)
    none = cn.augment_split(small_bundle.train, small_bundle, None, AugmentationConfig(variant="none"), "dg", seed=0)
    assert np.array_equal(none.images, small_bundle.train.images)


def test_compare_uses_same_pairs(small_bundle):
    cfg = cn.ConnectivityConfig(probe_epochs=2, probe_hidden=(4, 6), pairs_per_category=1, variant="pixel_only")
    orig, after = cn.compare_original_augmented(small_bundle, cfg, AugmentationConfig(), seed=0)
    assert [p for p, _ in orig.pair_values] == [p for p, _ in after.pair_values]


@pytest.mark.parametrize("kw", [dict(pairs_per_category=0), dict(test_fraction=1.0), dict(probe_lr=0.0), dict(pair_mode="x")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        cn.ConnectivityConfig(**kw)
