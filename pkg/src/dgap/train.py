"""ERM, linear probing then fine-tuning, augmented training, and the ablation driver."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .augment import AugmentationConfig, dgap_augment
from .data import DatasetBundle, sample_partners
from .models import Metrics, ModelSpec, ModelState, evaluate, init_model, loss_and_grads
from .rng import stream

log = logging.getLogger(__name__)

ABLATION_ARMS = ("lp_ft", "pixel_only", "frequency_only", "unified_ratio_v1", "full")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    pretrain_epochs: int = 10
    probe_epochs: int = 5
    finetune_epochs: int = 10
    batch_size: int = 32
    lr_pretrain: float = 0.02
    lr_probe: float = 0.05
    lr_finetune: float = 0.01
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    # global gradient-norm clip; 0 disables
    clip_norm: float = 2.0
    augmented_fraction: float = 0.5
    pair_mode: str = "da"
    seed: int = 0
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        for name in ("pretrain_epochs", "probe_epochs", "finetune_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"train.{name} must be >= 0")
        for name in ("lr_pretrain", "lr_probe", "lr_finetune"):
            if getattr(self, name) <= 0:
                raise ValueError(f"train.{name} must be > 0")
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        if self.optimizer not in ("sgd", "sgd_momentum"):
            raise ValueError(f"train.optimizer must be sgd or sgd_momentum, got {self.optimizer!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("train.momentum must lie in [0, 1)")
        if self.clip_norm < 0:
            raise ValueError("train.clip_norm must be >= 0")
        if not 0.0 <= self.augmented_fraction <= 1.0:
            raise ValueError("train.augmented_fraction must lie in [0, 1]")
        if self.pair_mode not in ("da", "dg"):
            raise ValueError(f"train.pair_mode must be da or dg, got {self.pair_mode!r}")


@dataclass
class RunRecord:
    run_id: str
    variant: str
    seed: int
    losses: list[float]
    id_metrics: Metrics
    ood_metrics: Metrics
    # per-stage epoch losses, and the stage-0 model's OOD metrics (shared by all arms of a seed)
    stage_losses: dict[str, list[float]] = field(default_factory=dict)
    pretrain_ood: Metrics | None = None


class Augmenter:
    """Replaces a fraction of each batch with augmented images.

    The model snapshot is whatever state is passed in at batch start, so all
    augmentations of one batch see the same weights.
    """

    def __init__(self, bundle: DatasetBundle, cfg: AugmentationConfig, fraction: float, mode: str):
        self.bundle, self.cfg, self.fraction, self.mode = bundle, cfg, fraction, mode

    def active(self) -> bool:
        return self.fraction > 0 and self.cfg.variant != "none"

    def __call__(self, state: ModelState, idx, x, y, rng: np.random.Generator) -> np.ndarray:
        n_aug = int(round(self.fraction * len(idx)))
        if n_aug == 0:
            return x
        pos = np.sort(rng.choice(len(idx), size=n_aug, replace=False))
        x2 = sample_partners(self.bundle, idx[pos], self.mode, rng)
        x = x.copy()
        x[pos] = dgap_augment(x[pos], y[pos], x2, state, self.cfg, rng)
        return x


def _fit(
    state: ModelState,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float,
    cfg: TrainConfig,
    stage: str,
    frozen=(),
    augmenter: Augmenter | None = None,
) -> tuple[ModelState, list[float]]:
    """Mini-batch SGD; returns the new state and per-epoch mean losses."""
    state = state.copy()
    if epochs == 0:
        return state, []
    n = len(labels)
    if n == 0:
        raise TrainingError(f"{stage}: empty training set")
    velocity = {k: np.zeros_like(v) for k, v in state.params.items() if k not in frozen}
    mu = cfg.momentum if cfg.optimizer == "sgd_momentum" else 0.0
    use_aug = augmenter is not None and augmenter.active()
    losses = []
    for epoch in range(epochs):
        order = stream(cfg.seed, f"shuffle/{stage}", epoch).permutation(n)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            x, y = images[idx], labels[idx]
            if use_aug:
                x = augmenter(state, idx, x, y, stream(cfg.seed, f"augment/{stage}", epoch, b))
            loss, grads = loss_and_grads(state, x, y, frozen)
            if not np.isfinite(loss):
                raise TrainingError(f"{stage}: loss diverged at epoch {epoch}")
            if cfg.clip_norm > 0:
                norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if norm > cfg.clip_norm:
                    grads = {k: g * (cfg.clip_norm / norm) for k, g in grads.items()}
            for k, g in grads.items():
                v = velocity[k]
                v *= mu
                v += g
                state.params[k] -= lr * v
            total += loss * len(idx)
            count += len(idx)
        losses.append(total / count)
        log.debug("%s epoch %d loss %.4f", stage, epoch, losses[-1])
    return state, losses


def erm_train(state: ModelState, bundle: DatasetBundle, cfg: TrainConfig, epochs: int | None = None,
              lr: float | None = None, stage: str = "train") -> ModelState:
    """Plain supervised training on the source split."""
    return erm_train_logged(state, bundle, cfg, epochs, lr, stage)[0]


def erm_train_logged(state, bundle, cfg, epochs=None, lr=None, stage="train"):
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    lr = cfg.lr_pretrain if lr is None else lr
    return _fit(state, bundle.train.images, bundle.train.labels, epochs, lr, cfg, stage)


def train_with_augmentation(state: ModelState, bundle: DatasetBundle, cfg: TrainConfig, epochs: int | None = None,
                            lr: float | None = None, stage: str = "train") -> ModelState:
    """Training where each batch has a fraction replaced by augmented images (no LP-FT)."""
    epochs = cfg.finetune_epochs if epochs is None else epochs
    lr = cfg.lr_finetune if lr is None else lr
    aug = Augmenter(bundle, cfg.augment, cfg.augmented_fraction, cfg.pair_mode)
    return _fit(state, bundle.train.images, bundle.train.labels, epochs, lr, cfg, stage, augmenter=aug)[0]


def pretrain(state: ModelState, bundle: DatasetBundle, cfg: TrainConfig):
    """Stage 0: ERM on source data, the stand-in for a pretrained encoder."""
    return _fit(state, bundle.train.images, bundle.train.labels, cfg.pretrain_epochs, cfg.lr_pretrain, cfg, "pretrain")


def linear_probe(state: ModelState, bundle: DatasetBundle, cfg: TrainConfig):
    """Stage 1: head only, encoder frozen."""
    frozen = tuple(state.encoder_names())
    return _fit(state, bundle.train.images, bundle.train.labels, cfg.probe_epochs, cfg.lr_probe, cfg, "probe", frozen)


def finetune(state: ModelState, bundle: DatasetBundle, cfg: TrainConfig):
    """Stage 2: all parameters, batches partly replaced by augmentations."""
    aug = Augmenter(bundle, cfg.augment, cfg.augmented_fraction, cfg.pair_mode)
    return _fit(state, bundle.train.images, bundle.train.labels, cfg.finetune_epochs, cfg.lr_finetune, cfg,
                "finetune", augmenter=aug)


def lp_ft(state: ModelState, bundle: DatasetBundle, cfg: TrainConfig, return_stages: bool = False):
    s0, l0 = pretrain(state, bundle, cfg)
    s1, l1 = linear_probe(s0, bundle, cfg)
    s2, l2 = finetune(s1, bundle, cfg)
    if return_stages:
        return s2, {"pretrain": (s0, l0), "probe": (s1, l1), "finetune": (s2, l2)}
    return s2


def smoothed_tail_nonincreasing(losses, window: int = 5, tol: float = 0.0) -> bool:
    """Window-averaged losses over the final half never rise by more than ``tol``."""
    losses = np.asarray(losses, dtype=float)
    if len(losses) < window + 1:
        return True
    sm = np.convolve(losses, np.ones(window) / window, mode="valid")
    tail = sm[len(sm) // 2 :]
    return bool(np.all(np.diff(tail) <= tol))


def arm_config(cfg: TrainConfig, arm: str) -> TrainConfig:
    variant = "none" if arm == "lp_ft" else arm
    return replace(cfg, augment=replace(cfg.augment, variant=variant))


def _ablation_seed(args):
    bundle, cfg, spec, seed, arms = args
    cfg = replace(cfg, seed=seed)
    state = init_model(spec, seed)
    s0, l0 = pretrain(state, bundle, cfg)
    s1, l1 = linear_probe(s0, bundle, cfg)
    erm_ood = evaluate(s0, bundle.ood_test.images, bundle.ood_test.labels)
    records = []
    for arm in arms:
        s2, l2 = finetune(s1, bundle, arm_config(cfg, arm))
        records.append(
            RunRecord(
                run_id=f"{arm}-s{seed}",
                variant=arm,
                seed=seed,
                losses=l1 + l2,
                id_metrics=evaluate(s2, bundle.id_test.images, bundle.id_test.labels),
                ood_metrics=evaluate(s2, bundle.ood_test.images, bundle.ood_test.labels),
                stage_losses={"pretrain": l0, "probe": l1, "finetune": l2},
                pretrain_ood=erm_ood,
            )
        )
    return records


def default_model_spec(bundle: DatasetBundle) -> ModelSpec:
    return ModelSpec("tiny_cnn", tuple(bundle.train.images.shape[1:]), bundle.spec.num_classes, (8, 16))


def run_ablation(bundle: DatasetBundle, cfg: TrainConfig, seeds, spec: ModelSpec | None = None,
                 arms=ABLATION_ARMS, jobs: int = 1, on_records=None) -> list[RunRecord]:
    """Five LP-FT arms per seed; stages 0 and 1 are shared across the arms of a seed.

    ``on_records`` receives each seed's records as soon as they exist, so
    callers can flush partial results.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("run_ablation needs at least one seed")
    spec = spec or default_model_spec(bundle)
    jobs_args = [(bundle, cfg, spec, s, tuple(arms)) for s in seeds]
    out: list[RunRecord] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for recs in pool.map(_ablation_seed, jobs_args):
                out.extend(recs)
                if on_records:
                    on_records(recs)
    else:
        for a in jobs_args:
            recs = _ablation_seed(a)
            out.extend(recs)
            if on_records:
                on_records(recs)
    return out


def summarize(records: list[RunRecord]) -> dict[str, dict[str, tuple[float, float]]]:
    """Per arm: metric name -> (mean, population std) across seeds."""
    out: dict[str, dict[str, tuple[float, float]]] = {}
    arms = list(dict.fromkeys(r.variant for r in records))
    for arm in arms:
        rs = [r for r in records if r.variant == arm]
        row = {}
        for split in ("id", "ood"):
            for metric in ("accuracy", "macro_f1"):
                vals = np.array([getattr(getattr(r, f"{split}_metrics"), metric) for r in rs])
                row[f"{split}_{metric}"] = (float(vals.mean()), float(vals.std()))
        out[arm] = row
    return out
