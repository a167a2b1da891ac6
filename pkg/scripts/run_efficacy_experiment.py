#!/usr/bin/env python3
"""Run the paired-seed efficacy experiment and print the report.

Usage:
    python3 scripts/run_efficacy_experiment.py --out exp_runs [--seeds 0 1 2 3 4]
                                               [--override KEY=VALUE ...]
"""

import argparse
import sys

from htan_spd.experiment import run_experiment


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="experiment directory")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--override", action="append", default=[],
                        metavar="KEY=VALUE")
    args = parser.parse_args()

    report = run_experiment(args.out, seeds=tuple(args.seeds),
                            overrides=tuple(args.override))
    for o in report.outcomes:
        print(f"seed {o.seed}: test_ce reg={o.test_ce_reg:.5f} "
              f"ablation={o.test_ce_ablation:.5f} margin={o.margin:+.5f} "
              f"spearman={o.spearman_dsq_coupling:+.3f} "
              f"loss_drop={o.loss_drop_fraction:.1%}")
    print(f"mean margin (ablation - regularized): {report.mean_margin:+.6f}")
    print(f"mean spearman(d^2, coupling): {report.mean_spearman:+.4f}")
    print(f"wall time: {report.wall_seconds:.1f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
