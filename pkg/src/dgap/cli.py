"""Command line: generate, train, ablation, connectivity, preview.

Exit codes: 0 success, 2 configuration error, 3 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .augment import dgap_augment_detailed
from .config import ConfigError, RunConfig, config_hash, parse_config, serialize_config
from .connectivity import ConnectivityReport, compare_original_augmented, guide_model
from .data import DatasetBundle, export_bundle, generate_dataset, sample_pair, write_image
from .models import (
    Metrics,
    confusion_matrix,
    init_model,
    load_checkpoint,
    metrics_from_confusion,
    predict,
    save_checkpoint,
)
from .rng import stream
from .spectral import low_freq_mask
from .train import ABLATION_ARMS, RunRecord, lp_ft, run_ablation, summarize

log = logging.getLogger("dgap")

CSV_HEADER = "run_id,variant,seed,split,metric,value"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class CsvSink:
    """Rows in the published schema, flushed as they arrive, closed by a provenance comment."""

    def __init__(self, path, cfg: RunConfig, seed):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.provenance = f"# provenance config={config_hash(cfg)} seed={seed} version={__version__}"
        self.fh = open(self.path, "w", newline="\n")
        self.fh.write(CSV_HEADER + "\n")
        self.fh.flush()

    def row(self, run_id, variant, seed, split, metric, value):
        for field_ in (run_id, variant, split, metric):
            if "," in str(field_):
                raise ValueError(f"CSV field {field_!r} contains a comma")
        self.fh.write(",".join(_fmt(v) for v in (run_id, variant, seed, split, metric, value)) + "\n")
        self.fh.flush()

    def close(self, complete: bool = True):
        if self.fh.closed:
            return
        self.fh.write(f"{self.provenance} status={'complete' if complete else 'incomplete'}\n")
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *_):
        self.close(exc_type is None)
        return False


def read_csv(path) -> tuple[list[dict[str, str]], str | None]:
    """Rows as dicts plus the provenance line (or None)."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: header does not match {CSV_HEADER!r}")
    keys = CSV_HEADER.split(",")
    rows, prov = [], None
    for line in lines[1:]:
        if line.startswith("#"):
            prov = line
            continue
        rows.append(dict(zip(keys, line.split(","))))
    return rows, prov


def metric_rows(metrics: Metrics, cm: np.ndarray | None = None) -> list[tuple[str, float]]:
    out = [("accuracy", metrics.accuracy), ("macro_f1", metrics.macro_f1), ("n", metrics.n)]
    for c in sorted(metrics.f1):
        out += [(f"precision_{c}", metrics.precision[c]), (f"recall_{c}", metrics.recall[c]), (f"f1_{c}", metrics.f1[c])]
    if cm is not None:
        for i in range(cm.shape[0]):
            for j in range(cm.shape[1]):
                out.append((f"cm_{i}_{j}", int(cm[i, j])))
    return out


def bundle_for(cfg: RunConfig) -> DatasetBundle:
    return generate_dataset(cfg.data, cfg.run.source_domains, cfg.run.target_domains, cfg.run.data_seed)


def cmd_generate(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    bundle = bundle_for(cfg)
    manifest = export_bundle(bundle, out / "dataset")
    with open(manifest, "a") as fh:
        fh.write(f"# provenance config={config_hash(cfg)} seed={cfg.run.data_seed} version={__version__} status=complete\n")
    (out / "config.txt").write_text(serialize_config(cfg))
    log.info("wrote %s", manifest)
    return EXIT_OK


def _confusion(state, split) -> np.ndarray:
    pred = predict(state, split.images).argmax(axis=1)
    return confusion_matrix(split.labels, pred, state.spec.num_classes)


def cmd_train(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    bundle = bundle_for(cfg)
    tcfg = cfg.train_config()
    variant = cfg.augment.variant
    run_id = f"{variant}-s{cfg.seed}"
    out.mkdir(parents=True, exist_ok=True)
    with CsvSink(out / "metrics.csv", cfg, cfg.seed) as sink:
        state, stages = lp_ft(init_model(cfg.model_spec(), cfg.seed), bundle, tcfg, return_stages=True)
        for stage, (_, losses) in stages.items():
            for i, loss in enumerate(losses):
                sink.row(run_id, variant, cfg.seed, stage, f"loss_epoch_{i}", loss)
        save_checkpoint(out / "model.ckpt", state)
        for name, split in (("id", bundle.id_test), ("ood", bundle.ood_test)):
            cm = _confusion(state, split)
            m = metrics_from_confusion(cm)
            for metric, value in metric_rows(m, cm):
                sink.row(run_id, variant, cfg.seed, name, metric, value)
    return EXIT_OK


def cmd_ablation(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    bundle = bundle_for(cfg)
    seeds = list(cfg.run.ablation_seeds)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train_config()
    records: list[RunRecord] = []
    with CsvSink(out / "ablation.csv", cfg, cfg.seed) as sink, \
            CsvSink(out / "ablation_detail.csv", cfg, cfg.seed) as detail:

        def flush(recs):
            for r in recs:
                sink.row(r.run_id, r.variant, r.seed, "ood", "accuracy", r.ood_metrics.accuracy)
                for split, m in (("id", r.id_metrics), ("ood", r.ood_metrics)):
                    for metric in ("accuracy", "macro_f1"):
                        detail.row(r.run_id, r.variant, r.seed, split, metric, getattr(m, metric))
            records.extend(recs)

        run_ablation(bundle, tcfg, seeds, cfg.model_spec(), ABLATION_ARMS, jobs, flush)
        for arm, stats in summarize(records).items():
            mean, std = stats["ood_accuracy"]
            sink.row(f"{arm}-summary", arm, "all", "ood", "accuracy_mean", mean)
            sink.row(f"{arm}-summary", arm, "all", "ood", "accuracy_std", std)
    return EXIT_OK


def report_rows(report: ConnectivityReport, tag: str) -> list[tuple[str, float]]:
    rows: list[tuple[str, float]] = []
    for p, v in report.pair_values:
        rows.append((f"pair_{p.category}_{p.y1}_{p.d1}_{p.y2}_{p.d2}", v))
    for c in sorted(report.means):
        rows.append((f"{c}_mean", report.means[c]))
        rows.append((f"{c}_pairs", report.counts[c]))
    for k in sorted(report.ratios):
        rows.append((k.replace("/", "_over_"), report.ratios[k]))
    rows.append(("ratios_withheld", int(report.ratios_withheld)))
    rows.append(("diverged", report.diverged))
    return rows


def cmd_connectivity(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    bundle = bundle_for(cfg)
    out.mkdir(parents=True, exist_ok=True)
    ccfg = cfg.connectivity
    ratios: dict[str, list[float]] = {"original": [], "augmented": []}
    with CsvSink(out / "connectivity.csv", cfg, cfg.seed) as sink:
        for seed in cfg.run.report_seeds:
            model = None
            if ccfg.variant in ("full", "frequency_only"):
                model = guide_model(bundle, ccfg, seed, cfg.model_spec(), cfg.train_config(seed))
            orig, aug = compare_original_augmented(bundle, ccfg, cfg.augment, seed, model, jobs)
            for tag, rep in (("original", orig), ("augmented", aug)):
                variant = "none" if tag == "original" else ccfg.variant
                for metric, value in report_rows(rep, tag):
                    sink.row(f"conn-{tag}-s{seed}", variant, seed, tag, metric, value)
                if "alpha/gamma" in rep.ratios:
                    ratios[tag].append(rep.ratios["alpha/gamma"])
        for tag, vals in ratios.items():
            if vals:
                sink.row(f"conn-{tag}-summary", "none" if tag == "original" else ccfg.variant, "all", tag,
                         "alpha_over_gamma_mean", float(np.mean(vals)))
    return EXIT_OK


def _centered_crop(values: np.ndarray, mask) -> np.ndarray:
    """Roll DC to the middle and crop to the mask's bounding square."""
    h, w = mask.shape
    shifted = np.roll(values, (h // 2, w // 2), axis=(-2, -1))
    grid = np.roll(mask.grid, (h // 2, w // 2), axis=(0, 1))
    rows = np.flatnonzero(grid.any(axis=1))
    cols = np.flatnonzero(grid.any(axis=0))
    return shifted[..., rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]


def heatmap(values: np.ndarray) -> np.ndarray:
    """Min-max normalise to [0, 1]; a constant map becomes mid gray."""
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi - lo <= 0:
        return np.full(values.shape, 0.5)
    return (values - lo) / (hi - lo)


def cmd_preview(cfg: RunConfig, out: Path, jobs: int = 1, checkpoint: str | None = None) -> int:
    bundle = bundle_for(cfg)
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(checkpoint) if checkpoint else init_model(cfg.model_spec(), cfg.seed)
    mask = low_freq_mask(cfg.data.image_size, cfg.data.image_size, cfg.augment.r)
    for i in range(cfg.run.preview_pairs):
        rng = stream(cfg.seed, "preview", i)
        ex, x2 = sample_pair(bundle, cfg.train.pair_mode, rng)
        res = dgap_augment_detailed(ex.image, ex.label, x2, model, cfg.augment, rng)
        stem = out / f"pair{i:02d}"
        write_image(f"{stem}_x1.ppm", ex.image)
        write_image(f"{stem}_x2.ppm", x2)
        if res.x_f is not None:
            write_image(f"{stem}_xf.ppm", res.x_f)
        if res.x_p is not None:
            write_image(f"{stem}_xp.ppm", res.x_p)
        write_image(f"{stem}_xhat.ppm", res.image)
        for name, m in (("G", res.G), ("D", res.D)):
            if m is None:
                continue
            crop = _centered_crop(m.values, mask)
            # one heatmap per channel, stacked vertically
            write_image(f"{stem}_{name}.pgm", heatmap(np.concatenate(list(crop), axis=0))[None])
            with open(f"{stem}_{name}.txt", "w") as fh:
                for c, grid in enumerate(crop):
                    fh.write(f"# channel {c}\n")
                    np.savetxt(fh, grid, fmt="%.17g")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "ablation": cmd_ablation,
    "connectivity": cmd_connectivity,
    "preview": cmd_preview,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (defaults when omitted)")
    common.add_argument("--seed", type=int, help="master seed, overrides the config")
    common.add_argument("--out", help="output directory, overrides the config")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="dgap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "preview":
            p.add_argument("--checkpoint", help="model checkpoint; a fresh model is used when omitted")
    sub.add_parser("show-config", parents=[common], help="print the effective config")
    return parser


def load_run_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        cfg = load_run_config(args)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "show-config":
        sys.stdout.write(serialize_config(cfg))
        return EXIT_OK
    out = Path(cfg.out)
    kwargs = {"checkpoint": args.checkpoint} if args.command == "preview" else {}
    try:
        return COMMANDS[args.command](cfg, out, args.jobs, **kwargs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, ArithmeticError, RuntimeError, OSError, IndexError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
