# fleet_finetune.py
"""
fleet_finetune.py

Joint baseline-prediction (BP) + anomaly-detection (AD) fine-tuning with a
frozen backbone.

Inputs:
- a FleetModel (usually restored from a pretraining checkpoint)
- labeled SignalWindows of one or more fleets, keyed by fleet_id
- RunConfig (loss.alpha, loss.bp_channels, loss.ad_channel, finetune.*)

Outputs:
- fitted bp/ad heads (in place), FinetuneResult with loss history and an
  EvalReport

Design goals
- labels: 0 = normal, 1 = anomalous; the BP loss only sees normal samples
  and is divided by the number of normal samples, not by L
- total = bp + alpha * ad, nothing else
- frozen tensors are bitwise identical before and after a run (checked)
- BP is decoded from a pass where the baseline channels' patch tokens are
  replaced by the task token, so the heads must predict the baseline from
  the covariates; AD reads the unmasked pass
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from fleet_config import RunConfig
from fleet_data import FleetSpec, SignalWindow
from fleet_errors import ConfigError, ContractError, DataParseError, DimensionError
from fleet_metrics import EvalReport, ad_metrics, bp_metrics, logistic_ad_baseline
from fleet_model import FINETUNE_HEADS, HEADS, FleetModel, decode_ad, decode_bp
from fleet_tensor import Tensor, add, backward, mse, mul, no_grad, reduce_sum, scalar_mul, sub
from fleet_tokenizer import TokenSequence
from fleet_training import (
    OptimizerState,
    ParameterStore,
    SeedStreams,
    count_params,
    optimizer_step,
    trainable_ratio,
)

logger = logging.getLogger(__name__)

ProgressFn = Optional[Callable[[str], None]]
Scalar = Union[Tensor, float]
FleetWindows = Mapping[str, Sequence[SignalWindow]]

TRAINABLE_RATIO_REFERENCE = 1e-3

# -----------------------------
# FreezePlan
# -----------------------------


@dataclass
class FreezePlan:
    trainable: Tuple[str, ...]
    frozen: Tuple[str, ...]

    @classmethod
    def heads_only(cls, store: ParameterStore, heads: Sequence[str] = FINETUNE_HEADS) -> "FreezePlan":
        prefixes = tuple(f"heads.{h}." for h in heads)
        names = store.names()
        return cls(
            trainable=tuple(n for n in names if n.startswith(prefixes)),
            frozen=tuple(n for n in names if not n.startswith(prefixes)),
        )

    @classmethod
    def all(cls, store: ParameterStore) -> "FreezePlan":
        return cls(trainable=tuple(store.names()), frozen=())

    @classmethod
    def from_mode(cls, store: ParameterStore, mode: str) -> "FreezePlan":
        if mode == "heads":
            return cls.heads_only(store)
        if mode == "all":
            return cls.all(store)
        raise ConfigError(f"finetune.trainable must be 'heads' or 'all', got {mode!r}")

    def check(self, store: ParameterStore) -> None:
        t, f = set(self.trainable), set(self.frozen)
        if t & f:
            raise ContractError(f"FreezePlan: names both trainable and frozen: {sorted(t & f)[:5]}")
        if t | f != set(store.names()):
            missing = sorted(set(store.names()) - (t | f))
            extra = sorted((t | f) - set(store.names()))
            raise ContractError(f"FreezePlan does not cover the store (missing {missing[:5]}, unknown {extra[:5]})")

    def apply(self, store: ParameterStore) -> None:
        self.check(store)
        store.set_trainable(self.trainable)

    def ratio(self, store: ParameterStore) -> float:
        total = count_params(store)
        return count_params(store, self.trainable) / total if total else 0.0

    def report(self, store: ParameterStore) -> Dict[str, float]:
        return {
            "trainable_tensors": len(self.trainable),
            "frozen_tensors": len(self.frozen),
            "trainable_params": count_params(store, self.trainable),
            "total_params": count_params(store),
            "trainable_ratio": self.ratio(store),
            "trainable_ratio_reference": TRAINABLE_RATIO_REFERENCE,
        }


# -----------------------------
# Losses
# -----------------------------


@dataclass
class GatedLoss:
    value: Tensor
    normal_count: int

    @property
    def no_normal_support(self) -> bool:
        return self.normal_count == 0


def bp_loss(y_bp, y_hat_bp: Tensor, y_ad) -> GatedLoss:
    """
    sum((1 - y_ad) * (y_bp - y_hat)^2) / n_normal, n_normal counting normal (channel, timestep) pairs.
    y_bp, y_hat_bp: [..., C, L]; y_ad: [..., L] (shared by the C channels) or [..., C, L].
    With no normal sample the loss is 0 (still connected to y_hat, zero gradient).
    """
    y_bp = np.asarray(y_bp.data if isinstance(y_bp, Tensor) else y_bp)
    y_ad = np.asarray(y_ad.data if isinstance(y_ad, Tensor) else y_ad)
    if y_bp.shape != y_hat_bp.shape:
        raise DimensionError(f"bp_loss: target {y_bp.shape} vs prediction {y_hat_bp.shape}")
    if y_ad.shape == y_hat_bp.shape[:-2] + y_hat_bp.shape[-1:]:
        y_ad = np.broadcast_to(y_ad[..., None, :], y_hat_bp.shape)
    elif y_ad.shape != y_hat_bp.shape:
        raise DimensionError(f"bp_loss: labels {y_ad.shape} do not fit prediction {y_hat_bp.shape}")
    if not np.isin(y_ad, (0, 1)).all():
        raise ContractError("bp_loss: labels must be 0 (normal) or 1 (anomalous)")

    dtype = y_hat_bp.data.dtype
    weight = Tensor(1.0 - y_ad.astype(np.float64), dtype=dtype)
    diff = sub(y_hat_bp, Tensor(y_bp, dtype=dtype))
    weighted = reduce_sum(mul(mul(diff, diff), weight))
    n_normal = int(np.sum(y_ad == 0))
    if n_normal == 0:
        logger.warning("bp_loss: no normal support, every timestep is anomalous")
        return GatedLoss(scalar_mul(weighted, 0.0), 0)
    return GatedLoss(scalar_mul(weighted, 1.0 / n_normal), n_normal)


def ad_loss(y_ad, y_hat_ad: Tensor) -> Tensor:
    """mean((y_ad - y_hat)^2) over every entry."""
    y = np.asarray(y_ad.data if isinstance(y_ad, Tensor) else y_ad)
    return mse(y_hat_ad, Tensor(np.broadcast_to(y, y_hat_ad.shape), dtype=y_hat_ad.data.dtype))


def total_loss(l_bp: Scalar, l_ad: Scalar, alpha: float, allow_zero: bool = False) -> Scalar:
    """l_bp + alpha * l_ad. alpha == 0 only with allow_zero (tests / ablations)."""
    if alpha < 0 or (alpha == 0 and not allow_zero):
        raise ConfigError(f"alpha must be > 0, got {alpha}")
    if isinstance(l_bp, Tensor) or isinstance(l_ad, Tensor):
        if not isinstance(l_ad, Tensor):
            return add(l_bp, float(alpha) * float(l_ad))
        return add(l_bp, scalar_mul(l_ad, float(alpha)))
    return float(l_bp) + float(alpha) * float(l_ad)


# -----------------------------
# Joint objective
# -----------------------------


def bp_channels_for(fleet: FleetSpec, cfg: RunConfig) -> Tuple[str, ...]:
    return tuple(cfg.loss.bp_channels) or (fleet.baseline_name,)


def ad_channel_for(fleet: FleetSpec, cfg: RunConfig) -> str:
    return cfg.loss.ad_channel or bp_channels_for(fleet, cfg)[0]


@dataclass
class EncodedBatch:
    windows: List[SignalWindow]
    bp_tok: TokenSequence
    bp_h: Tensor
    ad_tok: TokenSequence
    ad_h: Tensor
    bp_channels: Tuple[str, ...]
    ad_channel: str
    labels: np.ndarray  # [B, span]


def _labels(windows: Sequence[SignalWindow], span: int) -> np.ndarray:
    for w in windows:
        if not w.labeled:
            raise DataParseError(f"{w.fleet_id}@{w.start}: window has no AD labels")
    return np.stack([w.ad_labels[:span] for w in windows]).astype(np.int8)


def encode_batch(
    model: FleetModel,
    windows: Sequence[SignalWindow],
    fleet: FleetSpec,
    cfg: RunConfig,
    rng: Optional[np.random.Generator] = None,
) -> EncodedBatch:
    bp_ch = bp_channels_for(fleet, cfg)
    ad_ch = ad_channel_for(fleet, cfg)
    ad_tok, ad_h = model.encode(windows, fleet, rng=rng)
    if cfg.finetune.hide_baseline:
        bp_tok, bp_h = model.encode(windows, fleet, hidden_channels=bp_ch, rng=rng)
    else:
        bp_tok, bp_h = ad_tok, ad_h
    return EncodedBatch(
        windows=list(windows),
        bp_tok=bp_tok,
        bp_h=bp_h,
        ad_tok=ad_tok,
        ad_h=ad_h,
        bp_channels=bp_ch,
        ad_channel=ad_ch,
        labels=_labels(windows, ad_tok.span),
    )


@dataclass
class JointObjective:
    total: Tensor
    bp: GatedLoss
    ad: Tensor


def objective_from_encoded(
    model: FleetModel, enc: EncodedBatch, cfg: RunConfig, allow_zero_alpha: bool = False
) -> JointObjective:
    """Heads on top of (possibly cached) backbone outputs; BP in normalized units."""
    idx = enc.bp_tok.channel_indices(enc.bp_channels)
    y_hat = decode_bp(enc.bp_h, enc.bp_tok, enc.bp_channels, model.store, normalized=True)
    l_bp = bp_loss(enc.bp_tok.target[..., idx, :], y_hat, enc.labels)
    scores = decode_ad(enc.ad_h, enc.ad_tok, [enc.ad_channel], model.store)  # [B, 1, span]
    l_ad = ad_loss(enc.labels[:, None, :], scores)
    return JointObjective(total_loss(l_bp.value, l_ad, cfg.loss.alpha, allow_zero_alpha), l_bp, l_ad)


def joint_objective(
    model: FleetModel,
    windows: Sequence[SignalWindow],
    fleet: FleetSpec,
    cfg: RunConfig,
    rng: Optional[np.random.Generator] = None,
    allow_zero_alpha: bool = False,
) -> JointObjective:
    return objective_from_encoded(model, encode_batch(model, windows, fleet, cfg, rng), cfg, allow_zero_alpha)


# -----------------------------
# Fine-tuning loop
# -----------------------------


@dataclass
class FinetuneStats:
    epoch: int
    loss: float
    bp_loss: float
    ad_loss: float
    steps: int
    fleet_loss: Dict[str, float] = field(default_factory=dict)


@dataclass
class FinetuneResult:
    history: List[FinetuneStats]
    state: OptimizerState
    freeze: Dict[str, float]
    report: Optional[EvalReport] = None
    cached: bool = False


def _chunks(windows: Sequence[SignalWindow], size: int) -> List[List[SignalWindow]]:
    return [list(windows[i:i + size]) for i in range(0, len(windows), size)]


def _fleet_map(fleets: Sequence[FleetSpec], sets: FleetWindows, where: str) -> Dict[str, FleetSpec]:
    specs = {f.fleet_id: f for f in fleets}
    unknown = [fid for fid in sets if fid not in specs]
    if unknown:
        raise ConfigError(f"{where}: no FleetSpec for {unknown}")
    return specs


def _fleet_batches(sets: FleetWindows, size: int) -> List[Tuple[str, List[SignalWindow]]]:
    """Fleet-homogeneous chunks, fleets in mapping order."""
    return [(fid, chunk) for fid, windows in sets.items() for chunk in _chunks(windows, size)]


def finetune_run(
    model: FleetModel,
    train_sets: FleetWindows,
    fleets: Sequence[FleetSpec],
    cfg: RunConfig,
    streams: SeedStreams,
    freeze: Optional[FreezePlan] = None,
    eval_sets: Optional[FleetWindows] = None,
    epochs: Optional[int] = None,
    out: ProgressFn = print,
) -> FinetuneResult:
    """
    Fine-tune on labeled windows of one or more fleets (`train_sets` maps
    fleet_id -> windows). Each step sees one fleet; the batch order is
    shuffled across fleets every epoch. Default FreezePlan: bp/ad heads
    trainable, everything else frozen. Fleets the model has not seen get
    fresh pools first.
    """
    specs = _fleet_map(fleets, train_sets, "finetune_run")
    train_sets = {fid: list(ws) for fid, ws in train_sets.items() if ws}
    if not train_sets:
        raise ContractError("finetune_run: no training windows")
    for fid, windows in train_sets.items():
        unlabeled = [w for w in windows if not w.labeled]
        if unlabeled:
            raise DataParseError(f"{fid}: fine-tuning needs AD labels ({len(unlabeled)} unlabeled windows)")
    for fid in train_sets:
        if not model.pools.has_fleet(fid) or fid not in model.fleets:
            model.register_fleet(specs[fid], streams.init)

    freeze = freeze or FreezePlan.from_mode(model.store, cfg.finetune.trainable)
    freeze.apply(model.store)
    frozen_before = model.store.digest(freeze.frozen)
    freeze_report = freeze.report(model.store)
    logger.info(
        "fine-tuning %s: %d of %d parameters trainable (ratio %.6f, reference < %.3f)",
        ",".join(train_sets),
        freeze_report["trainable_params"],
        freeze_report["total_params"],
        freeze_report["trainable_ratio"],
        TRAINABLE_RATIO_REFERENCE,
    )

    epochs = cfg.training.finetune_epochs if epochs is None else epochs
    state = OptimizerState.from_config(cfg.training, lr=cfg.training.finetune_lr)
    head_names = set(model.head_names(HEADS))
    trainable = set(freeze.trainable)
    active = {fid: trainable & model.active_names(fid, FINETUNE_HEADS) for fid in train_sets}
    batches = _fleet_batches(train_sets, cfg.training.batch_size)

    cached = bool(cfg.finetune.cache_features and cfg.model.dropout == 0 and trainable <= head_names)
    cache: List[EncodedBatch] = []
    if cached:
        with no_grad():
            cache = [encode_batch(model, b, specs[fid], cfg) for fid, b in batches]
        logger.info("cached backbone features for %d batch(es)", len(cache))

    history: List[FinetuneStats] = []
    for epoch in range(epochs):
        sums = np.zeros(3)
        fleet_sums: Dict[str, float] = {}
        fleet_counts: Dict[str, int] = {}
        for i in streams.shuffle.permutation(len(batches)):
            fid, windows = batches[i]
            if cached:
                obj = objective_from_encoded(model, cache[i], cfg)
            else:
                obj = joint_objective(model, windows, specs[fid], cfg, streams.dropout)
            values = (obj.total.item(), obj.bp.value.item(), obj.ad.item())
            if not math.isfinite(values[0]):
                raise ContractError(f"non-finite fine-tuning loss at step {state.step + 1} ({fid})")
            backward(obj.total)
            optimizer_step(model.store, state, active=active[fid])
            sums += values
            fleet_sums[fid] = fleet_sums.get(fid, 0.0) + values[0]
            fleet_counts[fid] = fleet_counts.get(fid, 0) + 1
            if out is not None:
                out(f"{epoch},{fid},{state.step},{values[0]:.6f},{values[1]:.6f},{values[2]:.6f}")
        n = max(len(batches), 1)
        history.append(FinetuneStats(
            epoch, sums[0] / n, sums[1] / n, sums[2] / n, len(batches),
            fleet_loss={fid: fleet_sums[fid] / fleet_counts[fid] for fid in fleet_sums},
        ))
        logger.info("finetune epoch %d loss %.6f (bp %.6f, ad %.6f)", epoch, *(sums / n))

    if model.store.digest(freeze.frozen) != frozen_before:
        raise ContractError("finetune_run: a frozen parameter changed")

    report = evaluate(model, eval_sets if eval_sets else train_sets, fleets, cfg)
    return FinetuneResult(history=history, state=state, freeze=freeze_report, report=report, cached=cached)


# -----------------------------
# Evaluation
# -----------------------------


def predict(
    model: FleetModel, windows: Sequence[SignalWindow], fleet: FleetSpec, cfg: RunConfig
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(y_bp, y_hat_bp, labels, ad_scores): [n, C, span], [n, C, span], [n, span], [n, span]."""
    ys, y_hats, labels, scores = [], [], [], []
    with no_grad():
        for batch in _chunks(windows, cfg.training.batch_size):
            enc = encode_batch(model, batch, fleet, cfg)
            idx = enc.bp_tok.channel_indices(enc.bp_channels)
            span = enc.bp_tok.span
            y_hats.append(decode_bp(enc.bp_h, enc.bp_tok, enc.bp_channels, model.store).data)
            ys.append(np.stack([w.values[idx, :span] for w in batch]))
            scores.append(decode_ad(enc.ad_h, enc.ad_tok, [enc.ad_channel], model.store).data[:, 0, :])
            labels.append(enc.labels)
    return np.concatenate(ys), np.concatenate(y_hats), np.concatenate(labels), np.concatenate(scores)


def evaluate(model: FleetModel, eval_sets: FleetWindows, fleets: Sequence[FleetSpec], cfg: RunConfig) -> EvalReport:
    """
    One report row per fleet: BP metrics in signal units on normal
    timesteps, AD counts per timestep. Fleets with no windows are skipped.
    """
    specs = _fleet_map(fleets, eval_sets, "evaluate")
    store = model.store
    report = EvalReport(
        config_hash=cfg.config_hash(),
        seed=cfg.training.seed,
        trainable_ratio=trainable_ratio(store),
        trainable_params=count_params(store, lambda n: store[n].requires_grad),
        total_params=count_params(store),
        params=model.parameter_breakdown(),
    )
    report.notes["hide_baseline"] = "true" if cfg.finetune.hide_baseline else "false"
    for fid, windows in eval_sets.items():
        if not windows:
            logger.warning("evaluate: skipped fleet %s (no windows)", fid)
            continue
        fleet = specs[fid]
        y, y_hat, labels, scores = predict(model, windows, fleet, cfg)
        normal = np.broadcast_to((labels == 0)[:, None, :], y.shape)
        report.bp[fid] = bp_metrics(y[normal], y_hat[normal])
        if not report.bp[fid].defined:
            logger.warning("evaluate: %s has no normal timesteps, BP metrics are undefined", fid)
        report.ad[fid] = ad_metrics(labels, scores, cfg.loss.ad_threshold)
        report.notes[f"{fid}.bp_channels"] = ",".join(bp_channels_for(fleet, cfg))
        report.notes[f"{fid}.ad_channel"] = ad_channel_for(fleet, cfg)
        report.notes[f"{fid}.windows"] = str(len(windows))
    if not report.ad:
        raise ContractError("evaluate: no windows")
    return report


def add_logistic_baseline(
    report: EvalReport,
    train_sets: FleetWindows,
    eval_sets: FleetWindows,
    threshold: float,
    seed: int,
) -> EvalReport:
    """Per-fleet logistic-regression AD counts next to the model's; fleets without both classes are skipped."""
    for fid, test in eval_sets.items():
        train = train_sets.get(fid) or []
        if not train or not test:
            continue
        try:
            report.baseline_ad[fid] = logistic_ad_baseline(train, test, threshold, seed)
        except ContractError as e:
            logger.warning("logistic baseline skipped for %s: %s", fid, e)
    return report
