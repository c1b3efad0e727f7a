# fleet_pretrain.py
"""
fleet_pretrain.py

Masked signal-token pretraining.

Per batch: tokenize -> mask patch tokens (replaced by the fleet's task token)
-> backbone -> reconstruction head -> MSE over the samples of masked patches
-> backward -> Adam step.

Design goals
- masks are independent per channel: every channel loses the same number of
  patches, k = round(r * P) clamped to [1, P - 1]
- a MaskPlan is regenerated exactly from (seed, shape, ratio)
- the loss is computed in normalized space and only masked samples count
- every batch holds windows of a single fleet (M differs across fleets);
  batches of all fleets are interleaved in one shuffled order per epoch
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from fleet_data import SignalWindow
from fleet_errors import ConfigError, ContractError, DimensionError
from fleet_model import FleetModel, decode_recon, esat_forward
from fleet_tensor import Tensor, backward, masked_select, mse, no_grad, take_slice
from fleet_tokenizer import TokenSequence, replace_patches
from fleet_training import OptimizerState, SeedStreams, derive_seed, optimizer_step

logger = logging.getLogger(__name__)

ProgressFn = Optional[Callable[[str], None]]

# -----------------------------
# MaskPlan
# -----------------------------


def masked_per_channel(P: int, ratio: float) -> int:
    if P < 2:
        raise ConfigError(f"masking needs >= 2 patches per channel (one masked, one visible), got P={P}")
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must be in (0, 1), got {ratio}")
    k = int(math.floor(ratio * P + 0.5))
    return min(max(k, 1), P - 1)


@dataclass
class MaskPlan:
    mask: np.ndarray  # [..., M, P] int8, 0 = masked, 1 = visible
    ratio: float
    seed: int
    patch_len: int
    stride: int

    @classmethod
    def generate(
        cls,
        seed: int,
        M: int,
        P: int,
        ratio: float,
        patch_len: int,
        stride: int,
        batch: Optional[int] = None,
    ) -> "MaskPlan":
        k = masked_per_channel(P, ratio)
        rng = np.random.default_rng(int(seed))
        rows = (batch or 1) * M
        mask = np.ones((rows, P), dtype=np.int8)
        for r in range(rows):
            mask[r, rng.permutation(P)[:k]] = 0
        shape = (M, P) if batch is None else (batch, M, P)
        return cls(mask.reshape(shape), ratio, int(seed), patch_len, stride)

    @classmethod
    def visible(cls, shape: Tuple[int, ...], patch_len: int, stride: int) -> "MaskPlan":
        """Mask of all ones."""
        return cls(np.ones(shape, dtype=np.int8), 0.0, 0, patch_len, stride)

    @property
    def num_patches(self) -> int:
        return int(self.mask.shape[-1])

    def sample_mask(self, length: int) -> np.ndarray:
        """bool [..., M, length]: True on every sample inside a masked patch."""
        out = np.zeros(self.mask.shape[:-1] + (length,), dtype=bool)
        for p in range(self.num_patches):
            lo = p * self.stride
            hi = min(lo + self.patch_len, length)
            if lo >= length:
                break
            hit = self.mask[..., p] == 0
            out[..., lo:hi] |= hit[..., None]
        return out


# -----------------------------
# Masking + loss
# -----------------------------


def apply_mask(tok: TokenSequence, plan: MaskPlan, task_token: Tensor) -> TokenSequence:
    """Masked patch tokens become the first task-token vector; other sections untouched."""
    lead = tok.tokens.shape[:-2]
    if plan.mask.shape != lead + (tok.patch_count,):
        raise DimensionError(f"mask {plan.mask.shape} does not match patch grid {lead + (tok.patch_count,)}")
    masked = replace_patches(tok, plan.mask, take_slice(task_token, 0))
    return replace(masked, plan=plan)


def mstm_loss(x_norm, x_hat: Tensor, plan: MaskPlan) -> Tensor:
    """MSE over exactly the samples that belong to masked patches."""
    x_norm = x_norm if isinstance(x_norm, Tensor) else Tensor(x_norm, dtype=x_hat.data.dtype)
    if x_norm.shape != x_hat.shape:
        raise DimensionError(f"mstm_loss: shapes {x_norm.shape} and {x_hat.shape} differ")
    sel = plan.sample_mask(x_hat.shape[-1])
    if sel.shape != x_hat.shape:
        raise DimensionError(f"mstm_loss: plan covers {sel.shape}, reconstruction is {x_hat.shape}")
    if not sel.any():
        raise ContractError("mstm_loss: no masked samples")
    return mse(masked_select(x_hat, sel), masked_select(x_norm, sel))


# -----------------------------
# Training loops
# -----------------------------


@dataclass
class EpochStats:
    epoch: int
    fleet_loss: Dict[str, float] = field(default_factory=dict)
    steps: int = 0

    @property
    def mean_loss(self) -> float:
        return float(np.mean(list(self.fleet_loss.values()))) if self.fleet_loss else float("nan")


@dataclass
class PretrainResult:
    history: List[EpochStats]
    state: OptimizerState
    initial_loss: float = float("nan")


def _batches(
    datasets: Dict[str, List[SignalWindow]], batch_size: int, rng: np.random.Generator
) -> List[Tuple[str, List[SignalWindow]]]:
    out: List[Tuple[str, List[SignalWindow]]] = []
    for fid, windows in datasets.items():
        perm = rng.permutation(len(windows))
        for i in range(0, len(perm), batch_size):
            out.append((fid, [windows[j] for j in perm[i:i + batch_size]]))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def masked_step_loss(
    model: FleetModel,
    windows: Sequence[SignalWindow],
    fleet_id: str,
    plan_seed: int,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Forward pass of one pretraining batch, up to the scalar loss."""
    cfg = model.cfg
    fleet = model.fleet(fleet_id)
    tok = model.tokenize(windows, fleet)
    B, M = tok.tokens.shape[0], tok.num_channels
    plan = MaskPlan.generate(plan_seed, M, tok.patch_count, cfg.training.mask_ratio, tok.patch_len, tok.stride, batch=B)
    masked = apply_mask(tok, plan, model.pools.task(fleet_id))
    h = esat_forward(masked, model.store, cfg.model, rng if cfg.model.dropout > 0 else None)
    x_hat = decode_recon(h, masked, model.store)
    return mstm_loss(tok.target, x_hat, plan)


def pretrain_epoch(
    model: FleetModel,
    datasets: Dict[str, List[SignalWindow]],
    state: OptimizerState,
    streams: SeedStreams,
    epoch: int = 0,
    out: ProgressFn = print,
) -> EpochStats:
    """One pass over fleet-homogeneous batches of every fleet, interleaved."""
    if not datasets or not any(datasets.values()):
        raise ContractError("pretrain_epoch: no windows")
    trainable = set(model.store.trainable_names())
    sums: Dict[str, float] = {}
    counts: Dict[str, int] = {}
    stats = EpochStats(epoch=epoch)
    for fid, windows in _batches(datasets, model.cfg.training.batch_size, streams.shuffle):
        loss = masked_step_loss(model, windows, fid, derive_seed(streams.mask), streams.dropout)
        value = loss.item()
        if not math.isfinite(value):
            raise ContractError(f"non-finite pretraining loss at step {state.step + 1} ({fid})")
        backward(loss)
        optimizer_step(model.store, state, active=trainable & model.active_names(fid, ("recon",)))
        sums[fid] = sums.get(fid, 0.0) + value
        counts[fid] = counts.get(fid, 0) + 1
        stats.steps += 1
        if out is not None:
            out(f"{epoch},{fid},{state.step},{value:.6f}")
    stats.fleet_loss = {fid: sums[fid] / counts[fid] for fid in sums}
    return stats


def pretrain_run(
    model: FleetModel,
    datasets: Dict[str, List[SignalWindow]],
    streams: SeedStreams,
    epochs: Optional[int] = None,
    state: Optional[OptimizerState] = None,
    start_epoch: int = 0,
    out: ProgressFn = print,
) -> PretrainResult:
    """Train everything except the bp/ad heads for `epochs` epochs; resumes `state` if given."""
    cfg = model.cfg
    epochs = cfg.training.pretrain_epochs if epochs is None else epochs
    model.store.set_trainable(model.encoder_names())
    state = state or OptimizerState.from_config(cfg.training)
    history: List[EpochStats] = []

    initial = _mean_loss(model, datasets, derive_seed(np.random.default_rng(streams.seed)))
    logger.info("pretraining %d epoch(s) on %s from step %d (initial loss %.4f)", epochs, ",".join(datasets), state.step, initial)
    for e in range(start_epoch, start_epoch + epochs):
        stats = pretrain_epoch(model, datasets, state, streams, e, out)
        history.append(stats)
        logger.info("epoch %d mean loss %.6f", e, stats.mean_loss)
    return PretrainResult(history=history, state=state, initial_loss=initial)


def steps_per_epoch(datasets: Dict[str, List[SignalWindow]], batch_size: int) -> int:
    return sum(math.ceil(len(w) / batch_size) for w in datasets.values())


def resume_epoch(state: OptimizerState, datasets: Dict[str, List[SignalWindow]], batch_size: int) -> int:
    """Finished epochs behind `state.step`; a step count between epoch boundaries is rounded down."""
    per_epoch = steps_per_epoch(datasets, batch_size)
    if per_epoch == 0:
        raise ContractError("resume_epoch: no windows")
    done, rest = divmod(state.step, per_epoch)
    if rest:
        logger.warning("resume: step %d is not an epoch boundary (%d steps per epoch), continuing as epoch %d", state.step, per_epoch, done)
    return done


def fast_forward(streams: SeedStreams, datasets: Dict[str, List[SignalWindow]], batch_size: int, epochs: int) -> None:
    """
    Consume the shuffle and mask draws of `epochs` finished epochs, so fresh
    streams continue where an uninterrupted run would be. Dropout draws are
    not replayed.
    """
    for _ in range(epochs):
        for _ in _batches(datasets, batch_size, streams.shuffle):
            derive_seed(streams.mask)


def _mean_loss(model: FleetModel, datasets: Dict[str, List[SignalWindow]], seed: int) -> float:
    """Loss of the current parameters over every window, one fixed mask seed."""
    total, n = 0.0, 0
    bs = model.cfg.training.batch_size
    with no_grad():
        for fid, windows in datasets.items():
            for i in range(0, len(windows), bs):
                total += masked_step_loss(model, windows[i:i + bs], fid, seed).item()
                n += 1
    return total / n if n else float("nan")


def fit_single_batch(
    model: FleetModel,
    windows: Sequence[SignalWindow],
    fleet_id: str,
    steps: int = 200,
    plan_seed: int = 0,
    lr: Optional[float] = None,
) -> Tuple[float, float]:
    """Overfit sanity check: repeat one batch with one mask; returns (first, last) loss."""
    model.store.set_trainable(model.encoder_names())
    state = OptimizerState.from_config(model.cfg.training, lr=lr)
    active = set(model.store.trainable_names()) & model.active_names(fleet_id, ("recon",))
    first = last = float("nan")
    for i in range(steps):
        loss = masked_step_loss(model, windows, fleet_id, plan_seed)
        if i == 0:
            first = loss.item()
        backward(loss)
        optimizer_step(model.store, state, active=active)
    with no_grad():
        last = masked_step_loss(model, windows, fleet_id, plan_seed).item()
    return first, last
