# fleet_tokenizer.py
"""
fleet_tokenizer.py

Cross-fleet signal tokenizer: normalize -> patch -> project -> decorate.

Per channel the token row is laid out as

    [ prompt (P_p) | patches (P) | mean, std (2) | task (P_t) ]

so N_tok = P_p + P + 2 + P_t.

Design goals
- patch tokens are computed from the normalized channel, so an affine change
  of the raw signal leaves them untouched; only the two stat tokens see the
  raw level and spread (squashed with sign(x)*log(1+|x|) before a 1->d embed)
- prompt tokens are keyed by (fleet, sensor), task tokens by fleet; both live
  in the ParameterStore under `pool.prompt.<fleet>.<sensor>` / `pool.task.<fleet>`
- trailing samples not covered by the last patch are dropped
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from fleet_config import TokenizerConfig
from fleet_data import FleetSpec, SignalWindow
from fleet_errors import ConfigError, DimensionError, InputTooShortError, MissingPoolError
from fleet_tensor import Tensor, add, concat, expand, matmul, mul, reshape, stack
from fleet_training import ParameterStore, linear_init, normal_init

logger = logging.getLogger(__name__)

POOL_STD = 0.02
SECTION_NAMES: Tuple[str, ...] = ("prompt", "patch", "stat", "task")

# -----------------------------
# Patch arithmetic
# -----------------------------


def patch_count(L: int, pl: int, S: int) -> int:
    """floor((L - pl) / S) + 1 patch placements."""
    if pl < 1 or S < 1:
        raise ConfigError(f"patch_len and stride must be >= 1, got pl={pl}, S={S}")
    if L < pl:
        raise InputTooShortError(f"signal length {L} is shorter than one patch ({pl})")
    return (L - pl) // S + 1


def patch_span(P: int, pl: int, S: int) -> int:
    """Samples covered by P patches."""
    return (P - 1) * S + pl


def extract_patches(x: np.ndarray, pl: int, S: int) -> np.ndarray:
    """[..., L] -> [..., P, pl]"""
    P = patch_count(x.shape[-1], pl, S)
    view = np.lib.stride_tricks.sliding_window_view(x, pl, axis=-1)[..., ::S, :]
    return np.ascontiguousarray(view[..., :P, :])


# -----------------------------
# Normalization
# -----------------------------


def normalize_channel(x: np.ndarray, eps: float = 1e-5) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Per-series (last axis) standardization with population std.
    Returns (x_norm, mu, sigma) with sigma already clamped to >= eps.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 1:
        raise InputTooShortError("cannot normalize an empty series")
    mu = x.mean(axis=-1)
    sigma = np.maximum(x.std(axis=-1), eps)
    return (x - mu[..., None]) / sigma[..., None], mu, sigma


def denormalize(x_norm: np.ndarray, mu, sigma, eps: float = 1e-5) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.maximum(np.asarray(sigma, dtype=np.float64), eps)
    return np.asarray(x_norm, dtype=np.float64) * sigma[..., None] + mu[..., None]


def squash(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.log1p(np.abs(x))


# -----------------------------
# Token layout
# -----------------------------


@dataclass(frozen=True)
class TokenSections:
    prompt: slice
    patch: slice
    stat: slice
    task: slice

    @classmethod
    def build(cls, prompt_len: int, P: int, task_len: int) -> "TokenSections":
        a, b = prompt_len, prompt_len + P
        return cls(slice(0, a), slice(a, b), slice(b, b + 2), slice(b + 2, b + 2 + task_len))

    @property
    def n_tok(self) -> int:
        return self.task.stop

    def section_of(self, pos: int) -> str:
        for name in SECTION_NAMES:
            sl: slice = getattr(self, name)
            if sl.start <= pos < sl.stop:
                return name
        raise IndexError(f"token position {pos} outside [0, {self.n_tok})")

    def as_map(self) -> List[str]:
        return [self.section_of(i) for i in range(self.n_tok)]

    def positions(self, name: str) -> List[int]:
        sl: slice = getattr(self, name)
        return list(range(sl.start, sl.stop))


@dataclass
class TokenSequence:
    """Token grid [..., M, N_tok, d] plus what decoding needs to get back to signal units."""

    tokens: Tensor
    mu: np.ndarray  # [..., M] signal units
    sigma: np.ndarray  # [..., M] signal units, >= eps
    x_norm: np.ndarray  # [..., M, L]
    patch_count: int
    sections: TokenSections
    fleet_id: str
    channel_names: Tuple[str, ...]
    patch_len: int
    stride: int
    plan: Optional[object] = None  # MaskPlan when masked

    @property
    def num_channels(self) -> int:
        return len(self.channel_names)

    @property
    def span(self) -> int:
        return patch_span(self.patch_count, self.patch_len, self.stride)

    @property
    def target(self) -> np.ndarray:
        """Normalized input cropped to the decoded span."""
        return self.x_norm[..., : self.span]

    def channel_indices(self, channels: Sequence) -> List[int]:
        out = []
        for c in channels:
            if isinstance(c, (int, np.integer)):
                if not 0 <= int(c) < self.num_channels:
                    raise ConfigError(f"{self.fleet_id}: channel index {c} out of range")
                out.append(int(c))
            elif c in self.channel_names:
                out.append(self.channel_names.index(c))
            else:
                raise ConfigError(f"{self.fleet_id}: no channel named {c!r}")
        return out


# -----------------------------
# Pools
# -----------------------------
def prompt_name(fleet_id: str, sensor: str) -> str:
    return f"pool.prompt.{fleet_id}.{sensor}"


def task_name(fleet_id: str) -> str:
    return f"pool.task.{fleet_id}"


class TokenPools:
    """Prompt tokens per (fleet, sensor) and task tokens per fleet, stored in a ParameterStore."""

    def __init__(self, store: ParameterStore, cfg: TokenizerConfig):
        self.store = store
        self.cfg = cfg

    def register_fleet(self, fleet: FleetSpec, rng: np.random.Generator, trainable: bool = True) -> List[str]:
        """Create missing pools for `fleet` (normal, std 0.02). Idempotent."""
        d = self.cfg.model_dim
        created = []
        for sensor in fleet.channel_names:
            name = prompt_name(fleet.fleet_id, sensor)
            if name not in self.store:
                self.store.add(name, normal_init(rng, (self.cfg.prompt_len, d), POOL_STD), trainable)
                created.append(name)
        name = task_name(fleet.fleet_id)
        if name not in self.store:
            self.store.add(name, normal_init(rng, (self.cfg.task_len, d), POOL_STD), trainable)
            created.append(name)
        if created:
            logger.info("registered %d pool tensors for %s", len(created), fleet.fleet_id)
        return created

    def has_fleet(self, fleet_id: str) -> bool:
        return task_name(fleet_id) in self.store

    def prompt(self, fleet_id: str, sensor: str) -> Tensor:
        name = prompt_name(fleet_id, sensor)
        if name not in self.store:
            raise MissingPoolError(f"no prompt pool for fleet {fleet_id!r}, sensor {sensor!r}")
        return self.store[name]

    def task(self, fleet_id: str) -> Tensor:
        name = task_name(fleet_id)
        if name not in self.store:
            raise MissingPoolError(f"no task pool for fleet {fleet_id!r}")
        return self.store[name]

    def names_for(self, fleet: FleetSpec) -> List[str]:
        return [prompt_name(fleet.fleet_id, s) for s in fleet.channel_names] + [task_name(fleet.fleet_id)]


# -----------------------------
# Tokenizer parameters
# -----------------------------
TOKENIZER_PREFIX = "tokenizer."


def init_tokenizer_params(store: ParameterStore, cfg: TokenizerConfig, rng: np.random.Generator) -> None:
    d, pl = cfg.model_dim, cfg.patch_len
    store.add("tokenizer.patch_proj.weight", linear_init(rng, pl, d))
    store.add("tokenizer.patch_proj.bias", np.zeros(d))
    store.add("tokenizer.mean_embed.weight", linear_init(rng, 1, d))
    store.add("tokenizer.mean_embed.bias", np.zeros(d))
    store.add("tokenizer.std_embed.weight", linear_init(rng, 1, d))
    store.add("tokenizer.std_embed.bias", np.zeros(d))


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = matmul(x, w)
    return add(y, expand(b, y.shape))


# -----------------------------
# Tokenize
# -----------------------------


def tokenize_batch(
    windows: Sequence[SignalWindow],
    fleet: FleetSpec,
    pools: TokenPools,
    cfg: TokenizerConfig,
) -> TokenSequence:
    """Windows of one fleet -> TokenSequence with tokens [B, M, N_tok, d]."""
    if not windows:
        raise DimensionError("tokenize_batch: no windows")
    M = fleet.num_channels
    lengths = {w.length for w in windows}
    if len(lengths) != 1:
        raise DimensionError(f"tokenize_batch: windows differ in length {sorted(lengths)}")
    for w in windows:
        if w.num_channels != M:
            raise DimensionError(f"{fleet.fleet_id}: window has {w.num_channels} channels, fleet has {M}")
    L = lengths.pop()
    P = patch_count(L, cfg.patch_len, cfg.stride)
    store = pools.store
    dtype = store["tokenizer.patch_proj.weight"].data.dtype

    # look pools up first so a missing fleet fails before any compute
    prompts = [pools.prompt(fleet.fleet_id, s) for s in fleet.channel_names]
    task = pools.task(fleet.fleet_id)

    raw = np.stack([w.values for w in windows]).astype(np.float64)  # [B, M, L]
    x_norm, mu, sigma = normalize_channel(raw, cfg.eps)
    B = raw.shape[0]
    d = cfg.model_dim

    patches = Tensor(extract_patches(x_norm, cfg.patch_len, cfg.stride), dtype=dtype)  # [B, M, P, pl]
    patch_tok = _affine(patches, store["tokenizer.patch_proj.weight"], store["tokenizer.patch_proj.bias"])

    mean_in = Tensor(squash(mu)[..., None, None], dtype=dtype)  # [B, M, 1, 1]
    std_in = Tensor(squash(sigma)[..., None, None], dtype=dtype)
    mean_tok = _affine(mean_in, store["tokenizer.mean_embed.weight"], store["tokenizer.mean_embed.bias"])
    std_tok = _affine(std_in, store["tokenizer.std_embed.weight"], store["tokenizer.std_embed.bias"])

    prompt_tok = expand(stack(prompts, axis=0), (B, M, cfg.prompt_len, d))
    task_tok = expand(task, (B, M, cfg.task_len, d))

    tokens = concat([prompt_tok, patch_tok, mean_tok, std_tok, task_tok], axis=-2)
    sections = TokenSections.build(cfg.prompt_len, P, cfg.task_len)
    return TokenSequence(
        tokens=tokens,
        mu=mu,
        sigma=sigma,
        x_norm=x_norm,
        patch_count=P,
        sections=sections,
        fleet_id=fleet.fleet_id,
        channel_names=tuple(fleet.channel_names),
        patch_len=cfg.patch_len,
        stride=cfg.stride,
    )


def tokenize(window: SignalWindow, fleet: FleetSpec, pools: TokenPools, cfg: TokenizerConfig) -> TokenSequence:
    """Single window -> tokens [M, N_tok, d]."""
    tok = tokenize_batch([window], fleet, pools, cfg)
    return replace(
        tok,
        tokens=reshape(tok.tokens, tok.tokens.shape[1:]),
        mu=tok.mu[0],
        sigma=tok.sigma[0],
        x_norm=tok.x_norm[0],
    )


def replace_patches(tok: TokenSequence, keep: np.ndarray, fill: Tensor) -> TokenSequence:
    """
    Patch tokens where keep == 0 become `fill` ([d]); all other positions are
    passed through unchanged. keep has shape tokens.shape[:-2] + (P,).
    """
    lead = tok.tokens.shape[:-2]
    expected = lead + (tok.patch_count,)
    keep = np.asarray(keep)
    if keep.shape != expected:
        raise DimensionError(f"mask shape {keep.shape} does not match patch grid {expected}")
    if keep.all():
        return tok
    dtype = tok.tokens.data.dtype
    gate = np.ones(tok.tokens.shape, dtype=dtype)
    gate[..., tok.sections.patch, :] = keep[..., None].astype(dtype)
    filled = expand(fill, tok.tokens.shape)
    tokens = add(mul(tok.tokens, Tensor(gate, dtype=dtype)), mul(filled, Tensor(1.0 - gate, dtype=dtype)))
    return replace(tok, tokens=tokens)


def hide_channels(tok: TokenSequence, channels: Sequence, fill: Tensor) -> TokenSequence:
    """Replace every patch token of `channels` with `fill`."""
    idx = tok.channel_indices(channels)
    keep = np.ones(tok.tokens.shape[:-2] + (tok.patch_count,), dtype=np.int8)
    keep[..., idx, :] = 0
    return replace_patches(tok, keep, fill)

