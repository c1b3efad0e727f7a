# fleet_experiments.py
"""
fleet_experiments.py

Multi-run harnesses behind the CLI: stride sweep, model-width scaling grid
and the cross-fleet transfer comparison.

Every run follows the same recipe:
    synthesize fleets -> pretrain on the source fleets (unless from scratch)
    -> fine-tune bp/ad heads on the target fleet's labeled train windows
    -> evaluate on the target fleet's test windows

Outputs are pandas DataFrames written as CSV; every row carries config_hash
and seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from fleet_config import RunConfig, apply_overrides, validate_run_config
from fleet_data import (
    FleetDataset,
    SignalWindow,
    drop_labels,
    fleet_spec,
    generate_fleet,
    inject_faults,
    make_windows,
    split_bounds,
    split_windows,
    subsample_windows,
)
from fleet_errors import ConfigError, ContractError
from fleet_finetune import finetune_run
from fleet_metrics import EvalReport, PowerLawFit, fit_power_law, logistic_ad_baseline
from fleet_model import FleetModel
from fleet_pretrain import PretrainResult, pretrain_run
from fleet_tensor import precision
from fleet_training import count_params, seed_all

logger = logging.getLogger(__name__)

ProgressFn = Optional[Callable[[str], None]]

# -----------------------------
# Data preparation
# -----------------------------


@dataclass
class FleetData:
    dataset: FleetDataset
    splits: Dict[str, List[SignalWindow]] = field(default_factory=dict)
    pretrain: List[SignalWindow] = field(default_factory=list)


def synth_fleet(fleet_id: str, cfg: RunConfig, seed: int, labeled: bool = True) -> FleetDataset:
    """Generated signals; labeled fleets get injected faults, the rest stay clean and unlabeled."""
    spec = fleet_spec(fleet_id)
    L = cfg.data.window_len
    ds = generate_fleet(spec, cfg.data.points, seed, L)
    return inject_faults(ds, L, seed) if labeled else drop_labels(ds)


def prepare_fleet(dataset: FleetDataset, cfg: RunConfig) -> FleetData:
    """Fine-tuning splits (window stride) and pretraining windows (train block, pretrain stride)."""
    dt = cfg.data
    lo, hi = split_bounds(dataset.length, dt.split)[0]
    return FleetData(
        dataset=dataset,
        splits=split_windows(dataset, dt.window_len, dt.window_stride, dt.split),
        pretrain=make_windows(dataset, dt.window_len, dt.pretrain_stride, lo, hi),
    )


def prepare_fleets(cfg: RunConfig, seed: int, fleet_ids: Optional[Sequence[str]] = None) -> Dict[str, FleetData]:
    """Only the target fleet carries faults and labels."""
    ids = list(fleet_ids) if fleet_ids is not None else list(cfg.data.fleets)
    target = cfg.data.target_fleet
    return {fid: prepare_fleet(synth_fleet(fid, cfg, seed, labeled=fid == target), cfg) for fid in ids}


# -----------------------------
# One run
# -----------------------------


@dataclass
class RunOutcome:
    model: FleetModel
    report: EvalReport
    pretrain: Optional[PretrainResult] = None


def train_and_evaluate(
    cfg: RunConfig,
    data: Dict[str, FleetData],
    seed: int,
    pretrained: bool = True,
    label_fraction: float = 1.0,
    out: ProgressFn = None,
) -> RunOutcome:
    """Pretrain on source fleets (optional), fine-tune heads on the target, evaluate on its test split."""
    target_id = cfg.data.target_fleet
    if target_id not in data:
        raise ConfigError(f"target fleet {target_id!r} has no data")
    sources = [fid for fid in cfg.data.source_fleets if fid in data]
    streams = seed_all(seed)
    specs = [data[fid].dataset.spec for fid in (*sources, target_id)]
    model = FleetModel.build(cfg, specs, streams.init, seed)

    pre = None
    if pretrained:
        pre = pretrain_run(model, {fid: data[fid].pretrain for fid in sources}, streams, out=out)

    target = data[target_id]
    train = subsample_windows(target.splits["train"], label_fraction, seed)
    test = target.splits["test"] or target.splits["val"]
    spec = target.dataset.spec
    result = finetune_run(model, {target_id: train}, [spec], cfg, streams, eval_sets={target_id: test}, out=out)
    return RunOutcome(model=model, report=result.report, pretrain=pre)


def _row(outcome: RunOutcome, fleet_id: str) -> Dict[str, object]:
    bp = outcome.report.bp[fleet_id]
    ad = outcome.report.ad[fleet_id]
    return {
        "mae": bp.mae,
        "mse": bp.mse,
        "mape": bp.mape,
        "precision": ad.precision,
        "recall": ad.recall,
        "f1": ad.f1,
    }


# -----------------------------
# Stride sweep
# -----------------------------


def sweep_stride(
    cfg: RunConfig,
    values: Sequence[int],
    seed: int,
    out: ProgressFn = None,
) -> pd.DataFrame:
    """One pretrain + fine-tune run per stride S (patch_len = S); returns rows (stride, mae, ...)."""
    rows = []
    for S in values:
        run_cfg = cfg.copy()
        apply_overrides(run_cfg, [("tokenizer.patch_len", S), ("tokenizer.stride", S)])
        validate_run_config(run_cfg, raise_on_error=True)
        with precision(run_cfg.training.precision):
            data = prepare_fleets(run_cfg, seed)
            outcome = train_and_evaluate(run_cfg, data, seed, out=out)
        row = {"stride": S, "patch_len": S, **_row(outcome, run_cfg.data.target_fleet)}
        row.update(config_hash=run_cfg.config_hash(), seed=seed)
        logger.info("stride %d: mae %s", S, row["mae"])
        rows.append(row)
    return pd.DataFrame(rows)


# -----------------------------
# Scaling grid
# -----------------------------


def scaling_grid(
    cfg: RunConfig,
    dims: Sequence[int],
    seed: int,
    out: ProgressFn = None,
) -> Tuple[pd.DataFrame, Optional[PowerLawFit]]:
    """One run per model width; N = shared (non-pool) parameter count, L = held-out MAPE."""
    rows = []
    for d in dims:
        run_cfg = cfg.copy()
        apply_overrides(run_cfg, [("model.model_dim", d)])
        validate_run_config(run_cfg, raise_on_error=True)
        with precision(run_cfg.training.precision):
            data = prepare_fleets(run_cfg, seed)
            outcome = train_and_evaluate(run_cfg, data, seed, out=out)
        params = count_params(outcome.model.store, outcome.model.shared_names())
        row = {"model_dim": d, "params": params, **_row(outcome, run_cfg.data.target_fleet)}
        row.update(config_hash=run_cfg.config_hash(), seed=seed)
        logger.info("d=%d: %d params, mape %s", d, params, row["mape"])
        rows.append(row)
    df = pd.DataFrame(rows)
    points = [(n, m) for n, m in zip(df["params"], df["mape"]) if m is not None and np.isfinite(m)]
    fit = fit_power_law(points) if len(points) >= 3 else None
    return df, fit


# -----------------------------
# Transfer comparison
# -----------------------------


@dataclass
class TransferSummary:
    seeds: int
    mae_wins: int
    f1_wins: int

    def lines(self) -> List[str]:
        return [f"seeds={self.seeds}", f"mae_wins={self.mae_wins}", f"f1_wins={self.f1_wins}"]


def _beats(a: Optional[float], b: Optional[float], lower: bool = False) -> bool:
    """Strictly better score (higher, or lower with `lower`); an undefined score never wins."""
    if a is None:
        return False
    if b is None:
        return True
    return a < b if lower else a > b


def _logistic_f1(data: FleetData, label_fraction: float, threshold: float, seed: int) -> Optional[float]:
    train = subsample_windows(data.splits["train"], label_fraction, seed)
    test = data.splits["test"] or data.splits["val"]
    try:
        return logistic_ad_baseline(train, test, threshold, seed).f1
    except ContractError as e:
        logger.warning("logistic baseline skipped: %s", e)
        return None


def transfer_experiment(
    cfg: RunConfig,
    seeds: Sequence[int],
    label_fraction: float,
    out: ProgressFn = None,
) -> Tuple[pd.DataFrame, TransferSummary]:
    """Per seed: pretrained vs from-scratch model, both fine-tuned on `label_fraction` of the target."""
    rows = []
    for seed in seeds:
        with precision(cfg.training.precision):
            data = prepare_fleets(cfg, seed)
            pre = train_and_evaluate(cfg, data, seed, pretrained=True, label_fraction=label_fraction, out=out)
            scratch = train_and_evaluate(cfg, data, seed, pretrained=False, label_fraction=label_fraction, out=out)
        target = cfg.data.target_fleet
        logistic_f1 = _logistic_f1(data[target], label_fraction, cfg.loss.ad_threshold, seed)
        p, s = _row(pre, target), _row(scratch, target)
        row = {
            "seed": seed,
            "pretrained_mae": p["mae"],
            "scratch_mae": s["mae"],
            "pretrained_f1": p["f1"],
            "scratch_f1": s["f1"],
            "logistic_f1": logistic_f1,
            "mae_win": int(_beats(p["mae"], s["mae"], lower=True)),
            "f1_win": int(_beats(p["f1"], s["f1"])),
            "label_fraction": label_fraction,
            "config_hash": cfg.config_hash(),
        }
        logger.info("seed %d: mae %s vs %s, f1 %s vs %s", seed, p["mae"], s["mae"], p["f1"], s["f1"])
        rows.append(row)
    df = pd.DataFrame(rows)
    summary = TransferSummary(
        seeds=len(df),
        mae_wins=int(df["mae_win"].sum()) if len(df) else 0,
        f1_wins=int(df["f1_win"].sum()) if len(df) else 0,
    )
    return df, summary


# -----------------------------
# Plot
# -----------------------------


def plot_series(df: pd.DataFrame, x: str, y: str, path: str, title: str = "", logx: bool = False) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(df[x].to_numpy(dtype=np.float64), df[y].to_numpy(dtype=np.float64), marker="o")
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
