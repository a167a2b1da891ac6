"""Batch entry points: train, eval, analyze, covariance, gen-data, param-count.

Exit codes are a stable contract: 0 success, 1 usage/config error,
2 numerical failure, 3 I/O or file-format error. Commands only write inside
their own output paths; run directories are append-only and carry a
`resolved.cfg` echo so every result reproduces from the directory alone.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .apl import gaussian_gram, mahalanobis_sq
from .autodiff import DomainError, ShapeError, TapeError, constant, no_tape
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .config import ConfigError, RunSetup, parse_config_file, render_resolved, resolve
from .data import (
    SequenceBatch,
    covariance_by_slot,
    generate_splits,
    ground_truth_relation,
    load_dataset,
    mean_abs_covariance,
    save_dataset,
)
from .layers import activation_schedule, parameter_count
from .quadrature import QuadratureError
from .spd import NumericalError, spdnet_rollout
from .stats import spearman
from .training import (
    Adam,
    TrainState,
    build_model,
    evaluate,
    load_state,
    state_tensors,
    train_epoch,
)

METRICS_HEADER = "epoch,task_id,loss,acc,reg_value,ltheta_value,wall_ms"
ANALYSIS_HEADER = "block,slot,task_i,task_j,d_sq,metric_cond,gt_coupling,abs_cov"
COVARIANCE_HEADER = "slot,task_i,task_j,label_a,label_b,cov,abs_cov"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _fmt(x: float) -> str:
    return repr(float(x))


def _resolve_from_args(args) -> RunSetup:
    values = parse_config_file(args.config) if args.config else {}
    return resolve(values, overrides=tuple(args.override or ()),
                   seed=getattr(args, "seed", None),
                   out=getattr(args, "out", None))


def _fresh_dir(path: Path) -> Path:
    if path.exists() and any(path.iterdir()):
        raise ConfigError(f"output directory {path} exists and is not empty "
                          "(run directories are append-only)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _metric_trace(model, spdnets, cfg):
    """Per-block metric matrices and activation schedules (data-independent)."""
    out = []
    with no_tape():
        for block, net in zip(model.blocks, spdnets):
            betas, alphas = activation_schedule(block, cfg.seq_len)
            if cfg.spd_init == "gram":
                m0 = gaussian_gram(betas[0])
            else:
                m0 = constant(np.eye(cfg.basis))
            metrics = spdnet_rollout(m0, betas, net)
            out.append((betas, alphas, metrics))
    return out


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    setup = _resolve_from_args(args)
    cfg = setup.train
    out = _fresh_dir(Path(setup.out_dir))
    (out / "resolved.cfg").write_text(render_resolved(setup))
    (out / "seed.txt").write_text(f"{cfg.seed}\n")

    train_batch, test_batch = generate_splits(
        setup.data_spec, setup.train_sequences, setup.test_sequences)
    model, spdnets = build_model(cfg, setup.data_spec.input_dim,
                                 setup.data_spec.classes)

    started = time.perf_counter()
    state = TrainState(adam=Adam(lr=cfg.lr_phi))
    rows = [METRICS_HEADER]
    epoch_records = []
    try:
        for epoch in range(1, cfg.epochs + 1):
            rec = train_epoch(model, spdnets, train_batch, cfg, state, epoch)
            epoch_records.append(rec)
            for t in range(cfg.tasks):
                rows.append(",".join([
                    str(rec.epoch), str(t), _fmt(rec.task_losses[t]),
                    _fmt(rec.task_accs[t]), _fmt(rec.reg_value),
                    _fmt(rec.ltheta_value), _fmt(rec.wall_ms)]))
            if (setup.checkpoint_interval
                    and epoch % setup.checkpoint_interval == 0
                    and epoch != cfg.epochs):
                save_tensors(out / f"checkpoint_epoch{epoch}.bin",
                             state_tensors(model, spdnets))
    except (NumericalError, DomainError, QuadratureError) as err:
        (out / "metrics.csv").write_text("\n".join(rows) + "\n")
        (out / "diagnostics.json").write_text(json.dumps({
            "error": str(err),
            "batches_seen": state.batches_seen,
            "monitor": state.monitor.summary(),
        }, indent=2, sort_keys=True) + "\n")
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC

    (out / "metrics.csv").write_text("\n".join(rows) + "\n")
    save_tensors(out / "checkpoint_final.bin", state_tensors(model, spdnets))

    final_train = evaluate(model, train_batch)
    final_test = evaluate(model, test_batch)
    summary = {
        "epochs": cfg.epochs,
        "train_sequences": setup.train_sequences,
        "test_sequences": setup.test_sequences,
        "epoch_task_losses": [r.task_losses for r in epoch_records],
        "final_train": final_train.as_dict(),
        "final_test": final_test.as_dict(),
        "monitor": state.monitor.summary(),
        "wall_ms_total": (time.perf_counter() - started) * 1000.0,
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"run complete: {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _load_run(args) -> tuple[RunSetup, object, list, SequenceBatch]:
    ckpt = Path(args.checkpoint)
    config_path = args.config or (ckpt.parent / "resolved.cfg")
    if not Path(config_path).exists():
        raise ConfigError(
            f"no config given and {config_path} not found next to the checkpoint")
    setup = resolve(parse_config_file(config_path),
                    overrides=tuple(args.override or ()))
    batch = load_dataset(args.data)
    if batch.spec.seq_len != setup.train.seq_len:
        raise CheckpointError(
            f"dataset seq_len {batch.spec.seq_len} does not match configured "
            f"seq_len {setup.train.seq_len}")
    if batch.spec.tasks != setup.train.tasks:
        raise CheckpointError(
            f"dataset tasks {batch.spec.tasks} does not match configured "
            f"tasks {setup.train.tasks}")
    model, spdnets = build_model(setup.train, batch.spec.input_dim,
                                 batch.spec.classes)
    load_state(model, spdnets, load_tensors(args.checkpoint))
    return setup, model, spdnets, batch


def cmd_eval(args) -> int:
    setup, model, spdnets, batch = _load_run(args)
    result = evaluate(model, batch)
    payload = {
        "checkpoint": str(args.checkpoint),
        "dataset": str(args.data),
        "n_sequences": batch.n_sequences,
        "tasks": result.as_dict(),
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if args.json_out:
        Path(args.json_out).write_text(text + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze


def cmd_analyze(args) -> int:
    setup, model, spdnets, batch = _load_run(args)
    cfg = setup.train
    gt = ground_truth_relation(batch)
    n_tasks = cfg.tasks
    pair_cov = {}
    for i in range(n_tasks):
        for j in range(i + 1, n_tasks):
            pair_cov[(i, j)] = mean_abs_covariance(
                batch.labels[i], batch.labels[j], batch.spec.classes)

    rows = [ANALYSIS_HEADER]
    per_slot_mean_d01: list[list[float]] = [[] for _ in range(cfg.seq_len)]
    with no_tape():
        for l, (betas, alphas, metrics) in enumerate(
                _metric_trace(model, spdnets, cfg)):
            for n in range(cfg.seq_len):
                eigs = np.linalg.eigvalsh(metrics[n].data)
                cond = float(eigs.max() / max(eigs.min(), 1e-300))
                if n_tasks == 1:
                    rows.append(",".join([
                        str(l), str(n), "0", "0", _fmt(0.0), _fmt(cond),
                        _fmt(gt[n]), _fmt(0.0)]))
                    continue
                for i in range(n_tasks):
                    for j in range(i + 1, n_tasks):
                        d_sq = float(mahalanobis_sq(
                            alphas[n][i], alphas[n][j], metrics[n]).data)
                        if (i, j) == (0, 1):
                            per_slot_mean_d01[n].append(d_sq)
                        rows.append(",".join([
                            str(l), str(n), str(i), str(j), _fmt(d_sq),
                            _fmt(cond), _fmt(gt[n]),
                            _fmt(pair_cov[(i, j)][n])]))
    Path(args.out).write_text("\n".join(rows) + "\n")
    if n_tasks >= 2:
        mean_d = np.array([np.mean(v) for v in per_slot_mean_d01])
        rho_s = spearman(mean_d, gt)
        print(f"spearman_dsq_vs_coupling={rho_s!r}")
    print(f"analysis written: {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# covariance


def cmd_covariance(args) -> int:
    batch = load_dataset(args.data)
    classes = batch.spec.classes
    rows = [COVARIANCE_HEADER]
    for i in range(batch.spec.tasks):
        for j in range(i + 1, batch.spec.tasks):
            cov = covariance_by_slot(batch.labels[i], batch.labels[j], classes)
            for n in range(batch.seq_len):
                for a in range(classes):
                    for b in range(classes):
                        rows.append(",".join([
                            str(n), str(i), str(j), str(a), str(b),
                            _fmt(cov[n, a, b]), _fmt(abs(cov[n, a, b]))]))
    Path(args.out).write_text("\n".join(rows) + "\n")
    print(f"covariance written: {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    setup = _resolve_from_args(args)
    out = _fresh_dir(Path(setup.out_dir))
    train_batch, test_batch = generate_splits(
        setup.data_spec, setup.train_sequences, setup.test_sequences)
    save_dataset(out / "train.bin", train_batch)
    save_dataset(out / "test.bin", test_batch)
    print(f"wrote {out / 'train.bin'} ({train_batch.n_sequences} sequences)")
    print(f"wrote {out / 'test.bin'} ({test_batch.n_sequences} sequences)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# param-count


def cmd_param_count(args) -> int:
    setup = _resolve_from_args(args)
    cfg = setup.train
    report = parameter_count(
        d_in=setup.data_spec.input_dim, d_h=cfg.hidden, n_blocks=cfg.blocks,
        basis=cfg.basis, aux_hidden=cfg.aux_hidden, n_tasks=cfg.tasks,
        n_classes=setup.data_spec.classes, spd_layers=cfg.spd_layers,
        encoder=cfg.encoder)
    for line in report.lines():
        print(line)
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring


def _add_common(p: argparse.ArgumentParser, with_out_dir: bool = True):
    p.add_argument("--config", help="config file (defaults apply when omitted)")
    p.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="override train.seed")
    if with_out_dir:
        p.add_argument("--out", help="override run.out (output directory)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="htan-spd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model into a fresh run directory")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--json-out", help="also write the JSON report here")
    _add_common(p, with_out_dir=False)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze",
                       help="per-slot distance/metric/coupling analysis CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    _add_common(p, with_out_dir=False)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("covariance", help="per-slot label covariance CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(fn=cmd_covariance)

    p = sub.add_parser("gen-data", help="write train/test dataset files")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("param-count",
                       help="model size vs soft-sharing baseline report")
    _add_common(p, with_out_dir=False)
    p.set_defaults(fn=cmd_param_count)
    return parser


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, QuadratureError, DomainError, TapeError,
            ShapeError) as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
