# fleet_engine.py
"""
fleet_engine.py

Command-line entry point for the whole pipeline.

    python fleet_engine.py gen-data --spec fleet_a,fleet_b --no-labels --out data/
    python fleet_engine.py gen-data --spec fleet_c --out data/
    python fleet_engine.py pretrain --data data/fleet_a.csv data/fleet_b.csv --out-checkpoint pre.ckpt
    python fleet_engine.py finetune --data data/fleet_c.csv --checkpoint pre.ckpt --out-checkpoint ft.ckpt --report ft.report
    python fleet_engine.py eval --data data/fleet_c.csv --checkpoint ft.ckpt --report eval.report

finetune and eval take several labeled fleets (`--data a.csv b.csv`); one model
is fitted on all of them and the report has one bp/ad block per fleet.
    python fleet_engine.py gradcheck
    python fleet_engine.py sweep-stride --values 32,64,128,256 --out sweep.csv
    python fleet_engine.py fit-scaling --run-grid --dims 16,32,64 --out scaling.fit
    python fleet_engine.py export-features --data data/fleet_c.csv --checkpoint ft.ckpt --out features.csv
    python fleet_engine.py transfer --seeds 10 --label-fraction 0.1 --out transfer.csv
    python fleet_engine.py show-presets

Config layering: preset (or a checkpoint's config) <- --config file <- --set
key=value flags <- --seed / --precision.

Exit codes: 0 success, 1 runtime failure (one line on stderr), 2 usage error.
"""

from __future__ import annotations

import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from fleet_checkpoint import check_compatible, load, save
from fleet_config import PRESETS, RunConfig, resolve_config, validate_run_config
from fleet_data import (
    FleetDataset,
    drop_labels,
    fleet_spec,
    generate_fleet,
    inject_faults,
    load_csv,
    subsample_windows,
    write_csv,
)
from fleet_errors import ConfigError, DataParseError, FleetGPTError
from fleet_experiments import (
    FleetData,
    prepare_fleet,
    plot_series,
    scaling_grid,
    sweep_stride,
    transfer_experiment,
)
from fleet_finetune import FreezePlan, add_logistic_baseline, evaluate, finetune_run, joint_objective
from fleet_metrics import export_features, fit_power_law, read_scaling_points, write_scaling_points
from fleet_model import FleetModel
from fleet_pretrain import fast_forward, masked_step_loss, pretrain_run, resume_epoch
from fleet_tensor import grad_check, precision
from fleet_tokenizer import prompt_name, task_name
from fleet_training import seed_all

logger = logging.getLogger("fleet_engine")

GRADCHECK_TOLERANCE = 1e-4
SPLITS = ("train", "val", "test", "all")

# -----------------------------
# Shared helpers
# -----------------------------


def _csv_list(raw: str) -> List[str]:
    return [s.strip() for s in raw.split(",") if s.strip()]


def _int_list(raw: str) -> List[int]:
    try:
        return [int(s) for s in _csv_list(raw)]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {raw!r}") from None


def _config(args, default_preset: str = "desk", base: Optional[RunConfig] = None) -> RunConfig:
    cfg = resolve_config(
        preset=args.preset or default_preset,
        config_path=args.config,
        set_flags=args.set,
        seed=args.seed,
        precision=args.precision,
        base=None if args.preset else base,
    )
    for issue in validate_run_config(cfg):
        logger.warning("config %s: %s %s", issue.key, issue.message, issue.hint)
    print(f"resolved config (hash {cfg.config_hash()}):")
    for line in cfg.to_text().splitlines():
        print(f"  {line}")
    return cfg


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise OSError(f"output directory does not exist: {parent}")


def _load_datasets(paths: Sequence[str]) -> List[FleetDataset]:
    datasets = [load_csv(p) for p in paths]
    seen: Dict[str, str] = {}
    for path, ds in zip(paths, datasets):
        fid = ds.spec.fleet_id
        if fid in seen:
            raise ConfigError(f"fleet {fid!r} is given twice ({seen[fid]}, {path})")
        seen[fid] = path
    return datasets


def _require_labels(paths: Sequence[str], datasets: Sequence[FleetDataset], what: str) -> None:
    for path, ds in zip(paths, datasets):
        if ds.labels is None:
            raise DataParseError(f"{path}: {what} needs AD labels (manifest has_labels=false)")


def _check_fleets(model: FleetModel, datasets: Sequence[FleetDataset]) -> None:
    """A fleet the model already knows must bring the same sensors."""
    for ds in datasets:
        fid = ds.spec.fleet_id
        if not model.pools.has_fleet(fid):
            continue
        missing = [s for s in ds.spec.channel_names if prompt_name(fid, s) not in model.store]
        if missing:
            raise ConfigError(f"fleet {fid!r}: checkpoint has no prompt pools for {missing[:5]}")


def _restore(path: str, args, datasets: Sequence[FleetDataset]):
    """Checkpoint -> (model, optimizer state, cfg), cast to the resolved precision."""
    store, state, ckpt_cfg = load(path)
    cfg = _config(args, base=ckpt_cfg)
    check_compatible(store, cfg)
    store.cast(np.dtype(cfg.training.precision))
    model = FleetModel.from_store(cfg, store, [ds.spec for ds in datasets if task_name(ds.spec.fleet_id) in store])
    _check_fleets(model, datasets)
    return model, state, cfg


def _windows(data: FleetData, split: str):
    if split == "all":
        return [w for name in ("train", "val", "test") for w in data.splits[name]]
    return data.splits[split]


def _print_wrote(*paths: str) -> None:
    for p in paths:
        print(f"Wrote: {p}")


# -----------------------------
# Commands
# -----------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if not os.path.isdir(args.out):
        os.makedirs(args.out, exist_ok=True)
    points = args.points or cfg.data.points
    for fid in _csv_list(args.spec):
        spec = fleet_spec(fid)
        ds = generate_fleet(spec, points, cfg.training.seed, cfg.data.window_len)
        if args.no_labels:
            ds = drop_labels(ds)
        else:
            ds = inject_faults(ds, cfg.data.window_len, cfg.training.seed)
        _print_wrote(*write_csv(ds, os.path.join(args.out, f"{fid}.csv"), cfg.config_hash()))
    return 0


def cmd_pretrain(args) -> int:
    _ensure_parent(args.out_checkpoint)
    datasets = _load_datasets(args.data)
    if args.resume:
        model, state, cfg = _restore(args.resume, args, datasets)
    else:
        cfg = _config(args)
        model, state = None, None

    with precision(cfg.training.precision):
        # windows first: a fleet too short for one window fails before training
        windows = {ds.spec.fleet_id: prepare_fleet(ds, cfg).pretrain for ds in datasets}
        streams = seed_all(cfg.training.seed)
        start_epoch = 0
        if model is None:
            model = FleetModel.build(cfg, [ds.spec for ds in datasets], streams.init, cfg.training.seed)
        else:
            start_epoch = resume_epoch(state, windows, cfg.training.batch_size)
            fast_forward(streams, windows, cfg.training.batch_size, start_epoch)
            print(f"resuming at epoch {start_epoch} (step {state.step})")
        for ds in datasets:
            if ds.spec.fleet_id not in model.fleets:
                model.register_fleet(ds.spec, streams.init)
        result = pretrain_run(model, windows, streams, epochs=args.epochs, state=state, start_epoch=start_epoch)
        save(model.store, result.state, cfg, args.out_checkpoint)

    for stats in result.history:
        print(f"epoch {stats.epoch}: mean loss {stats.mean_loss:.6f}")
    _print_wrote(args.out_checkpoint)
    return 0


def cmd_finetune(args) -> int:
    _ensure_parent(args.out_checkpoint)
    datasets = _load_datasets(args.data)
    _require_labels(args.data, datasets, "fine-tuning")
    specs = [ds.spec for ds in datasets]
    if args.checkpoint:
        model, _, cfg = _restore(args.checkpoint, args, datasets)
    else:
        cfg = _config(args)
        model = None

    with precision(cfg.training.precision):
        streams = seed_all(cfg.training.seed)
        if model is None:
            model = FleetModel.build(cfg, specs, streams.init, cfg.training.seed)
        fraction = args.label_fraction if args.label_fraction is not None else cfg.finetune.label_fraction
        train, test = {}, {}
        for ds in datasets:
            data = prepare_fleet(ds, cfg)
            fid = ds.spec.fleet_id
            train[fid] = subsample_windows(data.splits["train"], fraction, cfg.training.seed)
            test[fid] = data.splits["test"] or data.splits["val"]
        result = finetune_run(model, train, specs, cfg, streams, eval_sets=test)
        save(model.store, result.state, cfg, args.out_checkpoint)

    outputs = [args.out_checkpoint]
    if args.report:
        outputs += list(result.report.write(args.report))
    print(f"trainable ratio: {result.freeze['trainable_ratio']:.6f} (reference < 0.001)")
    _print_wrote(*outputs)
    return 0


def cmd_eval(args) -> int:
    datasets = _load_datasets(args.data)
    _require_labels(args.data, datasets, "evaluation")
    model, _, cfg = _restore(args.checkpoint, args, datasets)
    with precision(cfg.training.precision):
        init = seed_all(cfg.training.seed).init
        for ds in datasets:
            if ds.spec.fleet_id not in model.fleets:
                model.register_fleet(ds.spec, init)
        prepared = {ds.spec.fleet_id: prepare_fleet(ds, cfg) for ds in datasets}
        eval_sets = {fid: _windows(data, args.split) for fid, data in prepared.items()}
        report = evaluate(model, eval_sets, [ds.spec for ds in datasets], cfg)
        if not args.no_baseline:
            train_sets = {fid: data.splits["train"] for fid, data in prepared.items()}
            add_logistic_baseline(report, train_sets, eval_sets, cfg.loss.ad_threshold, cfg.training.seed)
    for line in report.to_lines():
        print(line)
    _print_wrote(*report.write(args.report))
    return 0


def cmd_gradcheck(args) -> int:
    """Backward vs central differences over every parameter, pretraining and joint objectives."""
    cfg = _config(args, default_preset="tiny")
    cfg.training.precision = "float64"
    with precision("float64"):
        streams = seed_all(cfg.training.seed)
        spec = fleet_spec(cfg.data.fleets[0])
        L = cfg.data.window_len
        ds = inject_faults(generate_fleet(spec, max(cfg.data.points, 4 * L), cfg.training.seed, L), L, cfg.training.seed)
        windows = prepare_fleet(ds, cfg).splits["train"][:2]
        model = FleetModel.build(cfg, [spec], streams.init, cfg.training.seed)
        FreezePlan.all(model.store).apply(model.store)
        names = model.store.names()
        tensors = [model.store[n] for n in names]

        checks = {
            "pretrain": lambda: masked_step_loss(model, windows, spec.fleet_id, plan_seed=cfg.training.seed),
            "joint": lambda: joint_objective(model, windows, spec, cfg).total,
        }
        worst = 0.0
        for label, fn in checks.items():
            errors = grad_check(fn, tensors, h=1e-5)
            for n, e in zip(names, errors):
                print(f"{label},{n},{e:.3e}")
            worst = max(worst, max(errors))
    ok = worst <= GRADCHECK_TOLERANCE
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAIL'}, tolerance {GRADCHECK_TOLERANCE:g})")
    return 0 if ok else 1


def cmd_sweep_stride(args) -> int:
    cfg = _config(args)
    _ensure_parent(args.out)
    df = sweep_stride(cfg, _int_list(args.values), cfg.training.seed)
    df.to_csv(args.out, index=False, lineterminator="\n")
    outputs = [args.out]
    if args.plot:
        outputs.append(plot_series(df, "stride", "mae", args.plot, "held-out BP MAE vs stride"))
    print(df.to_string(index=False))
    _print_wrote(*outputs)
    return 0


def cmd_fit_scaling(args) -> int:
    cfg = _config(args)
    _ensure_parent(args.out)
    outputs = []
    if args.run_grid:
        df, fit = scaling_grid(cfg, _int_list(args.dims), cfg.training.seed)
        points_path = args.out + ".points.csv"
        write_scaling_points(df.to_dict("records"), points_path)
        outputs.append(points_path)
        if fit is None:
            raise ConfigError("fit-scaling needs at least 3 grid points")
        if args.plot:
            outputs.append(plot_series(df, "params", "mape", args.plot, "held-out MAPE vs parameters", logx=True))
    else:
        fit = fit_power_law(read_scaling_points(args.points))
    lines = [
        f"n_c={fit.n_c!r}",
        f"alpha_n={fit.alpha_n!r}",
        f"r2={fit.r2!r}",
        f"config_hash={cfg.config_hash()}",
        f"seed={cfg.training.seed}",
    ]
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    print("\n".join(lines[:3]))
    _print_wrote(args.out, *outputs)
    return 0


def cmd_export_features(args) -> int:
    _ensure_parent(args.out)
    datasets = _load_datasets([args.data])
    ds = datasets[0]
    model, _, cfg = _restore(args.checkpoint, args, datasets)
    with precision(cfg.training.precision):
        if ds.spec.fleet_id not in model.fleets:
            model.register_fleet(ds.spec, seed_all(cfg.training.seed).init)
        df = export_features(model, _windows(prepare_fleet(ds, cfg), args.split), ds.spec, args.out, cfg.config_hash(), cfg.training.seed)
    print(f"{len(df)} windows exported")
    _print_wrote(args.out)
    return 0


def cmd_transfer(args) -> int:
    cfg = _config(args)
    _ensure_parent(args.out)
    seeds = [cfg.training.seed + i for i in range(args.seeds)]
    df, summary = transfer_experiment(cfg, seeds, args.label_fraction)
    df.to_csv(args.out, index=False, lineterminator="\n")
    summary_path = args.out + ".summary"
    with open(summary_path, "w", encoding="utf-8") as f:
        f.write("\n".join(summary.lines() + [f"config_hash={cfg.config_hash()}"]) + "\n")
    print(df.to_string(index=False))
    print(f"pretrained wins: MAE {summary.mae_wins}/{summary.seeds}, F1 {summary.f1_wins}/{summary.seeds}")
    _print_wrote(args.out, summary_path)
    return 0


def cmd_show_presets(args) -> int:
    print("Available presets:")
    for name in sorted(PRESETS):
        overrides = PRESETS[name]
        print(f"- {name}" + ("" if overrides else " (defaults)"))
        for k, v in overrides.items():
            print(f"    {k}={v}")
    return 0


# -----------------------------
# CLI
# -----------------------------


def _parse_cli_args(argv=None):
    import argparse

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", choices=sorted(PRESETS), help="Base parameter preset (default: desk).")
    common.add_argument("--config", help="key=value config file layered over the preset.")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override one config key (repeatable).")
    common.add_argument("--seed", type=int, help="Seed for every random stream.")
    common.add_argument("--precision", choices=["float32", "float64"])
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="fleet_engine", description="Cross-fleet self-supervised diagnostics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="Write synthetic fleet CSV + manifest files.")
    p.add_argument("--spec", required=True, help="Comma-separated fleet ids (e.g. fleet_a,fleet_b,fleet_c).")
    p.add_argument("--points", type=int, help="Samples per fleet (default: data.points).")
    p.add_argument("--out", required=True, help="Output directory.")
    p.add_argument("--no-labels", action="store_true", help="Pretraining data: no faults injected, no ad_label column.")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", parents=[common], help="Masked-token pretraining over several fleets.")
    p.add_argument("--data", nargs="+", required=True, help="Fleet CSV files (manifests alongside).")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--resume", help="Checkpoint to continue from (step counter and optimizer state).")
    p.add_argument("--epochs", type=int, help="Epochs to run (default: training.pretrain_epochs).")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="Fit the BP/AD heads on one or more labeled fleets.")
    p.add_argument("--data", nargs="+", required=True, help="Labeled fleet CSV files (manifests alongside).")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="Pretrained checkpoint.")
    src.add_argument("--from-scratch", action="store_true", help="Randomly initialized backbone.")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--report", help="Write an evaluation report on the test split.")
    p.add_argument("--label-fraction", type=float, help="Fraction of labeled train windows used.")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint on one or more labeled fleets.")
    p.add_argument("--data", nargs="+", required=True, help="Labeled fleet CSV files (manifests alongside).")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--no-baseline", action="store_true", help="Skip the logistic-regression AD reference block.")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference gradient check (tiny preset, float64).")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep-stride", parents=[common], help="Pretrain + fine-tune per stride (patch_len = stride).")
    p.add_argument("--values", default="32,64,128,256")
    p.add_argument("--out", required=True)
    p.add_argument("--plot", help="Optional PNG of MAE vs stride.")
    p.set_defaults(func=cmd_sweep_stride)

    p = sub.add_parser("fit-scaling", parents=[common], help="Power-law fit of MAPE vs parameter count.")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--points", help="CSV with params,mape columns.")
    src.add_argument("--run-grid", action="store_true", help="Train one model per --dims value first.")
    p.add_argument("--dims", default="16,32,64")
    p.add_argument("--out", required=True)
    p.add_argument("--plot", help="Optional PNG of MAPE vs parameters (grid only).")
    p.set_defaults(func=cmd_fit_scaling)

    p = sub.add_parser("export-features", parents=[common], help="Mean-pooled final-layer features per window.")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=SPLITS, default="all")
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("transfer", parents=[common], help="Pretrained vs from-scratch on the target fleet, per seed.")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--label-fraction", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("show-presets", parents=[common], help="Print available presets and exit.")
    p.set_defaults(func=cmd_show_presets)

    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = _parse_cli_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (FleetGPTError, ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
