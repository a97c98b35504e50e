"""Run the five-arm LP-FT ablation and print mean OOD accuracy per arm.

    python3 scripts/run_ablation.py --config my.cfg --out runs/ablation --jobs 2
"""
import sys
from pathlib import Path

from dgap import cli


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    code = cli.main(["ablation", *argv])
    if code:
        return code
    cfg = cli.load_run_config(cli.build_parser().parse_args(["ablation", *argv]))
    rows, _ = cli.read_csv(Path(cfg.out) / "ablation.csv")
    stats = {}
    for r in rows:
        if r["seed"] == "all":
            stats.setdefault(r["variant"], {})[r["metric"]] = float(r["value"])
    print(f"{'arm':<18}{'ood acc':>10}{'std':>8}")
    for arm, s in stats.items():
        print(f"{arm:<18}{s['accuracy_mean']:>10.4f}{s['accuracy_std']:>8.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
