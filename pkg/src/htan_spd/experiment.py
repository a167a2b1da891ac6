"""Paired-seed efficacy experiment: regularized runs vs their ablations.

For each seed the default configuration is trained twice (functional
regularizer on at its default weight, and off), sharing data and
initialization, and the regularized checkpoint is passed through the
analysis command. The report collects the test cross-entropy margins, the
per-seed rank correlation between the distance trace and the ground-truth
coupling, and the aggregated invariant/directionality monitors.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import cli
from .stats import spearman


@dataclass
class SeedOutcome:
    seed: int
    test_ce_reg: float
    test_ce_ablation: float
    margin: float
    spearman_dsq_coupling: float
    loss_drop_fraction: float        # epoch-1 to final mean training loss
    phi_dd_pass: int
    phi_steps: int
    theta_dd_pass: int
    theta_steps: int
    metric_violations: int
    stiefel_violations: int
    metric_sym_max: float
    metric_min_eig: float


@dataclass
class ExperimentReport:
    seeds: list[int]
    outcomes: list[SeedOutcome]
    mean_margin: float
    mean_test_ce_reg: float
    mean_test_ce_ablation: float
    mean_spearman: float
    wall_seconds: float

    def as_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "outcomes": [asdict(o) for o in self.outcomes],
            "mean_margin": self.mean_margin,
            "mean_test_ce_reg": self.mean_test_ce_reg,
            "mean_test_ce_ablation": self.mean_test_ce_ablation,
            "mean_spearman": self.mean_spearman,
            "wall_seconds": self.wall_seconds,
        }


def _mean_test_ce(summary: dict) -> float:
    tasks = summary["final_test"]
    return float(np.mean([tasks[k]["loss"] for k in sorted(tasks)]))


def _run_training(out_dir: Path, seed: int, overrides: list[str]) -> dict:
    args = ["train", "--out", str(out_dir), "--seed", str(seed)]
    for ov in overrides:
        args += ["--override", ov]
    code = cli.main(args)
    if code != 0:
        raise RuntimeError(f"training run failed (exit {code}): {out_dir}")
    return json.loads((out_dir / "summary.json").read_text())


def _spearman_from_analysis(csv_path: Path) -> float:
    rows = [line.split(",") for line in
            csv_path.read_text().strip().splitlines()[1:]]
    per_slot: dict[int, list[float]] = {}
    gt: dict[int, float] = {}
    for r in rows:
        slot, task_i, task_j = int(r[1]), int(r[2]), int(r[3])
        if (task_i, task_j) != (0, 1):
            continue
        per_slot.setdefault(slot, []).append(float(r[4]))
        gt[slot] = float(r[6])
    slots = sorted(per_slot)
    mean_d = np.array([np.mean(per_slot[s]) for s in slots])
    coupling = np.array([gt[s] for s in slots])
    return spearman(mean_d, coupling)


def run_experiment(base_dir, seeds=(0, 1, 2, 3, 4),
                   overrides: tuple[str, ...] = ()) -> ExperimentReport:
    """Train both arms for every seed under `base_dir` and aggregate."""
    base = Path(base_dir)
    base.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    outcomes = []
    for seed in seeds:
        reg_dir = base / f"seed{seed}_reg"
        abl_dir = base / f"seed{seed}_ablation"
        data_dir = base / f"seed{seed}_data"
        reg_summary = _run_training(reg_dir, seed, list(overrides))
        abl_summary = _run_training(abl_dir, seed,
                                    [*overrides, "lambda=0", "theta_period=0"])
        if cli.main(["gen-data", "--out", str(data_dir), "--seed", str(seed),
                     *sum((["--override", ov] for ov in overrides), [])]) != 0:
            raise RuntimeError("gen-data failed")
        analysis_csv = base / f"seed{seed}_analysis.csv"
        code = cli.main(["analyze",
                         "--checkpoint", str(reg_dir / "checkpoint_final.bin"),
                         "--data", str(data_dir / "test.bin"),
                         "--out", str(analysis_csv)])
        if code != 0:
            raise RuntimeError(f"analysis failed (exit {code})")

        epoch_losses = [float(np.mean(row))
                        for row in reg_summary["epoch_task_losses"]]
        monitor = reg_summary["monitor"]
        abl_monitor = abl_summary["monitor"]
        outcomes.append(SeedOutcome(
            seed=seed,
            test_ce_reg=_mean_test_ce(reg_summary),
            test_ce_ablation=_mean_test_ce(abl_summary),
            margin=_mean_test_ce(abl_summary) - _mean_test_ce(reg_summary),
            spearman_dsq_coupling=_spearman_from_analysis(analysis_csv),
            loss_drop_fraction=1.0 - epoch_losses[-1] / epoch_losses[0],
            phi_dd_pass=(monitor["phi_dd_nonpositive"]
                         + abl_monitor["phi_dd_nonpositive"]),
            phi_steps=monitor["phi_steps"] + abl_monitor["phi_steps"],
            theta_dd_pass=monitor["theta_dd_nonnegative"],
            theta_steps=monitor["theta_steps"],
            metric_violations=(monitor["metric_violations"]
                               + abl_monitor["metric_violations"]),
            stiefel_violations=(monitor["stiefel_violations"]
                                + abl_monitor["stiefel_violations"]),
            metric_sym_max=monitor["metric_sym_max"],
            metric_min_eig=(monitor["metric_min_eig"]
                            if monitor["metric_min_eig"] is not None
                            else float("inf")),
        ))

    report = ExperimentReport(
        seeds=list(seeds),
        outcomes=outcomes,
        mean_margin=float(np.mean([o.margin for o in outcomes])),
        mean_test_ce_reg=float(np.mean([o.test_ce_reg for o in outcomes])),
        mean_test_ce_ablation=float(np.mean([o.test_ce_ablation
                                             for o in outcomes])),
        mean_spearman=float(np.mean([o.spearman_dsq_coupling
                                     for o in outcomes])),
        wall_seconds=time.perf_counter() - started,
    )
    (base / "experiment_report.json").write_text(
        json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n")
    return report
