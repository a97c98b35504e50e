"""Connectivity of the source split before and after augmentation.

Prints the per-seed alpha/gamma and beta/gamma ratios and their means.
"""
import sys
from pathlib import Path

from dgap import cli


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    code = cli.main(["connectivity", *argv])
    if code:
        return code
    cfg = cli.load_run_config(cli.build_parser().parse_args(["connectivity", *argv]))
    rows, _ = cli.read_csv(Path(cfg.out) / "connectivity.csv")
    for r in rows:
        if "_over_" in r["metric"]:
            print(f"seed {r['seed']:>3}  {r['split']:<10} {r['metric']:<24} {float(r['value']):.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
