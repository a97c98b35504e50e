"""Connectivity between class-domain groups, measured as binary-probe test error.

Two groups ``(y1, d1)`` and ``(y2, d2)`` are relabelled 0/1, a fresh tiny CNN
is trained to tell them apart, and its held-out error is the connectivity of
the pair (0 = trivially separable, 0.5 = indistinguishable). Pairs fall in
four categories:

    rho:   same class, same domain
    alpha: same class, different domains
    beta:  different classes, same domain
    gamma: different classes, different domains
"""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .augment import AugmentationConfig, dgap_augment
from .data import DatasetBundle, Split, sample_partners
from .models import ModelSpec, ModelState, evaluate, init_model
from .rng import stream
from .train import TrainConfig, TrainingError, _fit

log = logging.getLogger(__name__)

CATEGORIES = ("rho", "alpha", "beta", "gamma")


class PairSamplingError(ValueError):
    pass


def categorize(y1: int, d1: int, y2: int, d2: int) -> str:
    if y1 == y2:
        return "rho" if d1 == d2 else "alpha"
    return "beta" if d1 == d2 else "gamma"


@dataclass(frozen=True)
class ClassDomainPair:
    y1: int
    d1: int
    y2: int
    d2: int

    @property
    def category(self) -> str:
        return categorize(self.y1, self.d1, self.y2, self.d2)

    def label(self) -> str:
        return f"({self.y1},{self.d1})-({self.y2},{self.d2})"

    def swapped(self) -> "ClassDomainPair":
        return ClassDomainPair(self.y2, self.d2, self.y1, self.d1)

    def canonical(self) -> "ClassDomainPair":
        """The ordering with the smaller (y, d) coordinate first."""
        return self.swapped() if (self.y2, self.d2) < (self.y1, self.d1) else self


@dataclass(frozen=True)
class ConnectivityConfig:
    pairs_per_category: int = 10
    test_fraction: float = 0.5
    # long enough to learn the class shapes, short enough that gamma stays above 0
    probe_epochs: int = 8
    probe_lr: float = 0.02
    probe_batch: int = 32
    probe_hidden: tuple[int, ...] = (8, 16)
    include_rho: bool = False
    variant: str = "unified_ratio_v1"
    pair_mode: str = "da"
    # stage-0 ERM epochs for the frozen model that guides augmentation
    guide_epochs: int = 10

    def __post_init__(self):
        if self.pairs_per_category < 1:
            raise ValueError("connectivity.pairs_per_category must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("connectivity.test_fraction must lie in (0, 1)")
        if self.probe_epochs < 1 or self.probe_lr <= 0 or self.probe_batch < 1:
            raise ValueError("connectivity probe epochs/lr/batch must be positive")
        if self.pair_mode not in ("da", "dg"):
            raise ValueError(f"connectivity.pair_mode must be da or dg, got {self.pair_mode!r}")


@dataclass
class PairData:
    pair: ClassDomainPair
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


@dataclass
class ConnectivityReport:
    means: dict[str, float]
    counts: dict[str, int]
    pair_values: list[tuple[ClassDomainPair, float]]
    ratios: dict[str, float] = field(default_factory=dict)
    ratios_withheld: bool = False
    diverged: int = 0


def _coordinate_indices(split: Split, y: int, d: int) -> np.ndarray:
    return np.flatnonzero((split.labels == y) & (split.domains == d))


def _split_indices(idx: np.ndarray, test_fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    idx = rng.permutation(idx)
    n_test = int(round(test_fraction * len(idx)))
    n_test = min(max(n_test, 1), len(idx) - 1)
    return np.sort(idx[n_test:]), np.sort(idx[:n_test])


def build_pair_dataset(split: Split, pair: ClassDomainPair, test_fraction: float, seed: int) -> PairData:
    """Group (y1, d1) -> label 0, group (y2, d2) -> label 1, stratified split.

    For a rho pair (one coordinate) the coordinate's examples are halved at
    random and the halves play the two groups.
    """
    a = _coordinate_indices(split, pair.y1, pair.d1)
    b = _coordinate_indices(split, pair.y2, pair.d2)
    if len(a) < 2 or len(b) < 2:
        raise PairSamplingError(f"pair {pair.label()}: a coordinate has fewer than 2 examples")
    # key the split on the unordered pair so swapping the coordinates only flips the labels
    canon = pair.canonical()
    flipped = canon != pair
    rng = stream(seed, f"pair_split/{canon.label()}")
    if pair.y1 == pair.y2 and pair.d1 == pair.d2:
        perm = rng.permutation(a)
        a, b = np.sort(perm[: len(perm) // 2]), np.sort(perm[len(perm) // 2 :])
    first, second = (b, a) if flipped else (a, b)
    f_tr, f_te = _split_indices(first, test_fraction, rng)
    s_tr, s_te = _split_indices(second, test_fraction, rng)
    # canonical order throughout; only the 0/1 assignment depends on the ordering
    lab = np.int64(1 if flipped else 0)
    return PairData(
        pair,
        split.images[np.concatenate([f_tr, s_tr])],
        np.concatenate([np.full(len(f_tr), lab), np.full(len(s_tr), 1 - lab)]),
        split.images[np.concatenate([f_te, s_te])],
        np.concatenate([np.full(len(f_te), lab), np.full(len(s_te), 1 - lab)]),
    )


def estimate_connectivity(data: PairData, cfg: ConnectivityConfig, seed: int) -> float | None:
    """Test error of a from-scratch binary tiny CNN; ``None`` if training diverged."""
    spec = ModelSpec("tiny_cnn", tuple(data.train_x.shape[1:]), 2, tuple(cfg.probe_hidden))
    tcfg = TrainConfig(batch_size=cfg.probe_batch, seed=seed, clip_norm=2.0)
    state = init_model(spec, seed)
    # a zero head makes the probe mirror-symmetric: swapping the 0/1 groups swaps its outputs
    for k in state.head:
        state.params[k][...] = 0.0
    try:
        state, _ = _fit(state, data.train_x, data.train_y, cfg.probe_epochs, cfg.probe_lr, tcfg,
                        f"probe/{data.pair.canonical().label()}")
    except TrainingError as exc:
        log.warning("connectivity probe for %s diverged: %s", data.pair.label(), exc)
        return None
    return 1.0 - evaluate(state, data.test_x, data.test_y).accuracy


def enumerate_pairs(split: Split, include_rho: bool = False) -> dict[str, list[ClassDomainPair]]:
    coords = sorted({(int(y), int(d)) for y, d in zip(split.labels, split.domains) if y >= 0})
    out: dict[str, list[ClassDomainPair]] = {c: [] for c in CATEGORIES}
    for (y1, d1), (y2, d2) in itertools.combinations(coords, 2):
        p = ClassDomainPair(y1, d1, y2, d2)
        out[p.category].append(p)
    if include_rho:
        out["rho"] = [ClassDomainPair(y, d, y, d) for y, d in coords]
    return out


def select_pairs(split: Split, cfg: ConnectivityConfig, seed: int) -> list[ClassDomainPair]:
    """Up to ``pairs_per_category`` pairs per category, sampled without replacement."""
    pools = enumerate_pairs(split, cfg.include_rho)
    chosen = []
    cats = CATEGORIES if cfg.include_rho else CATEGORIES[1:]
    for cat in cats:
        pool = pools[cat]
        if not pool:
            raise PairSamplingError(f"no {cat} pairs available in this dataset")
        k = min(cfg.pairs_per_category, len(pool))
        pick = np.sort(stream(seed, f"select_pairs/{cat}").choice(len(pool), size=k, replace=False))
        chosen.extend(pool[i] for i in pick)
    return chosen


def augment_split(split: Split, bundle: DatasetBundle, model: ModelState | None, aug: AugmentationConfig,
                  mode: str, seed: int, batch: int = 64) -> Split:
    """One augmentation per example, generated once with a frozen model.

    Partners come from the unlabeled target pool (``da``) or from other
    domains of ``split`` itself (``dg``).
    """
    host = DatasetBundle(split, bundle.target_unlabeled, split, split)
    out = np.empty_like(split.images)
    for b, start in enumerate(range(0, len(split), batch)):
        idx = np.arange(start, min(start + batch, len(split)))
        rng = stream(seed, "connectivity_augment", b)
        x2 = sample_partners(host, idx, mode, rng)
        out[idx] = dgap_augment(split.images[idx], split.labels[idx], x2, model, aug, rng)
    return Split(out, split.labels.copy(), split.domains.copy())


def _estimate_job(args):
    split, pair, cfg, seed = args
    data = build_pair_dataset(split, pair, cfg.test_fraction, seed)
    return estimate_connectivity(data, cfg, seed)


def connectivity_report(split: Split, cfg: ConnectivityConfig, seed: int, pairs=None, jobs: int = 1) -> ConnectivityReport:
    """Estimate every selected pair and fold the results in pair order."""
    pairs = list(pairs) if pairs is not None else select_pairs(split, cfg, seed)
    args = [(split, p, cfg, seed) for p in pairs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(_estimate_job, args))
    else:
        values = [_estimate_job(a) for a in args]
    per_cat: dict[str, list[float]] = {c: [] for c in CATEGORIES}
    pair_values = []
    diverged = 0
    for p, v in zip(pairs, values):
        if v is None:
            diverged += 1
            continue
        per_cat[p.category].append(v)
        pair_values.append((p, v))
    means = {c: float(np.mean(v)) for c, v in per_cat.items() if v}
    counts = {c: len(v) for c, v in per_cat.items() if v}
    report = ConnectivityReport(means, counts, pair_values, diverged=diverged)
    gamma = means.get("gamma", 0.0)
    if gamma > 0:
        for c in ("alpha", "beta"):
            if c in means:
                report.ratios[f"{c}/gamma"] = means[c] / gamma
    else:
        report.ratios_withheld = True
    return report


def guide_model(bundle: DatasetBundle, cfg: ConnectivityConfig, seed: int, spec: ModelSpec | None = None,
                train_cfg: TrainConfig | None = None) -> ModelState:
    """Stage-0 ERM model used (frozen) to compute sensitivity maps."""
    from .train import default_model_spec, pretrain

    spec = spec or default_model_spec(bundle)
    tc = replace(train_cfg or TrainConfig(), seed=seed, pretrain_epochs=cfg.guide_epochs)
    return pretrain(init_model(spec, seed), bundle, tc)[0]


def compare_original_augmented(bundle: DatasetBundle, cfg: ConnectivityConfig, aug: AugmentationConfig, seed: int,
                               model: ModelState | None = None, jobs: int = 1) -> tuple[ConnectivityReport, ConnectivityReport]:
    """Reports for the source split before and after augmentation, on the same pairs."""
    split = bundle.train
    pairs = select_pairs(split, cfg, seed)
    aug = replace(aug, variant=cfg.variant)
    if model is None and aug.variant in ("full", "frequency_only"):
        model = guide_model(bundle, cfg, seed)
    augmented = augment_split(split, bundle, model, aug, cfg.pair_mode, seed)
    original = connectivity_report(split, cfg, seed, pairs, jobs)
    after = connectivity_report(augmented, cfg, seed, pairs, jobs)
    return original, after
