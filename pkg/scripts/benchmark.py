"""Run a config (default: the axisymmetric benchmark) and print the
comparison table.  Equivalent to ``fluxvol benchmark --config ...``."""

import argparse
import sys

from fluxvol.cli import comparison_table, run_scenario, scenario_ok
from fluxvol.config import RunConfig, benchmark_config


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--out-dir", help="override [output] dir")
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()
    cfg = RunConfig.from_toml(args.config) if args.config else benchmark_config()
    if args.out_dir:
        cfg.output.dir = args.out_dir
    cfg.workers = args.workers
    reports = run_scenario(cfg)
    print(comparison_table(reports))
    print(f"artifacts in {cfg.output.dir}/")
    return 0 if scenario_ok(cfg, reports) else 1


if __name__ == "__main__":
    sys.exit(main())
