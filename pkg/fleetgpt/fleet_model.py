# fleet_model.py
"""
fleet_model.py

Two-stage attention backbone + output heads, and FleetModel, which ties the
tokenizer, backbone, heads and ParameterStore together.

One block (post-norm, every sublayer followed by residual add + LayerNorm):

    channel attention   across the M channels at each token position
    time attention      across the N_tok positions within each channel
    feed-forward        d -> ffn -> d, GELU

Design goals
- tensors may carry any leading batch dims: [..., M, N_tok, d]
- separate Q/K/V/O weights per stage, no projection biases, single head by
  default (num_heads configurable)
- a learned positional embedding over N_tok is added to the time-attention
  queries and keys only, so a zero-layer stack is the identity and the
  channel stage has no notion of channel order
- every matmul runs inside an op scope ("projection", "attention_core",
  "ffn", "head") so multiply counters can be compared with closed forms
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from fleet_config import ModelConfig, RunConfig
from fleet_data import FleetSpec, SignalWindow
from fleet_errors import ConfigError, DimensionError
from fleet_tensor import (
    Tensor,
    add,
    dropout,
    expand,
    fold,
    gelu,
    index_select,
    layer_norm,
    matmul,
    mul,
    op_scope,
    reshape,
    scalar_mul,
    sigmoid,
    softmax_lastdim,
    swap_last,
    take_slice,
)
from fleet_tokenizer import (
    TokenPools,
    TokenSequence,
    hide_channels,
    init_tokenizer_params,
    patch_count,
    tokenize_batch,
)
from fleet_training import ParameterStore, linear_init, normal_init

logger = logging.getLogger(__name__)

HEADS: Tuple[str, ...] = ("recon", "bp", "ad")
FINETUNE_HEADS: Tuple[str, ...] = ("bp", "ad")
POS_STD = 0.02

# -----------------------------
# Closed-form multiply counts (per block)
# -----------------------------


def attention_multiplies(M: int, N: int, d: int) -> int:
    """Score + context matmuls of both stages: 2 (M^2 N d + N^2 M d)."""
    return 2 * (M * M * N * d + N * N * M * d)


def projection_multiplies(M: int, N: int, d: int) -> int:
    """Q, K, V, O projections of both stages: 2 * 4 * M N d^2."""
    return 8 * M * N * d * d


def joint_attention_multiplies(M: int, N: int, d: int) -> int:
    """Score + context matmuls of one attention over all M*N tokens: 2 (MN)^2 d."""
    return 2 * (M * N) ** 2 * d


# -----------------------------
# Parameter initialization
# -----------------------------
def block_prefix(i: int) -> str:
    return f"backbone.block{i}"


def init_backbone_params(store: ParameterStore, cfg: ModelConfig, n_tok: int, rng: np.random.Generator) -> None:
    d, h = cfg.model_dim, cfg.ffn_width
    if cfg.num_heads < 1 or d % cfg.num_heads:
        raise ConfigError(f"model_dim {d} not divisible by num_heads {cfg.num_heads}")
    if cfg.num_layers > 0:
        store.add("backbone.pos_embed", normal_init(rng, (n_tok, d), POS_STD))
    for i in range(cfg.num_layers):
        p = block_prefix(i)
        for stage in ("chan", "time"):
            for proj in ("q", "k", "v", "o"):
                store.add(f"{p}.{stage}.{proj}", linear_init(rng, d, d))
        for ln in ("ln_chan", "ln_time", "ln_ffn"):
            store.add(f"{p}.{ln}.gain", np.ones(d))
            store.add(f"{p}.{ln}.bias", np.zeros(d))
        store.add(f"{p}.ffn.w1", linear_init(rng, d, h))
        store.add(f"{p}.ffn.b1", np.zeros(h))
        store.add(f"{p}.ffn.w2", linear_init(rng, h, d))
        store.add(f"{p}.ffn.b2", np.zeros(d))


def init_head_params(store: ParameterStore, d: int, pl: int, rng: np.random.Generator) -> None:
    for head in HEADS:
        store.add(f"heads.{head}.weight", linear_init(rng, d, pl))
        store.add(f"heads.{head}.bias", np.zeros(pl))


# -----------------------------
# Attention
# -----------------------------


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # [..., S, d] -> [..., heads, S, dh]
    if heads == 1:
        return x
    *lead, S, d = x.shape
    x = reshape(x, (*lead, S, heads, d // heads))
    return swap_last(x, -2, -3)


def _merge_heads(x: Tensor, heads: int) -> Tensor:
    if heads == 1:
        return x
    x = swap_last(x, -2, -3)
    *lead, S, H, dh = x.shape
    return reshape(x, (*lead, S, H * dh))


def attention(
    x: Tensor,
    store: ParameterStore,
    prefix: str,
    heads: int = 1,
    pos: Optional[Tensor] = None,
) -> Tensor:
    """
    Scaled dot-product self-attention over axis -2 of x [..., S, d].
    `pos` ([..., S, d]) is added to the query/key inputs only.
    """
    d = x.shape[-1]
    qk_in = x if pos is None else add(x, pos)
    with op_scope("projection"):
        q = matmul(qk_in, store[f"{prefix}.q"])
        k = matmul(qk_in, store[f"{prefix}.k"])
        v = matmul(x, store[f"{prefix}.v"])
    q, k, v = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    with op_scope("attention_core"):
        scores = scalar_mul(matmul(q, swap_last(k, -1, -2)), 1.0 / math.sqrt(d // heads))
        ctx = matmul(softmax_lastdim(scores), v)
    with op_scope("projection"):
        return matmul(_merge_heads(ctx, heads), store[f"{prefix}.o"])


def _residual_norm(x: Tensor, sub: Tensor, store: ParameterStore, prefix: str, p: float, rng) -> Tensor:
    return layer_norm(add(x, dropout(sub, p, rng)), store[f"{prefix}.gain"], store[f"{prefix}.bias"])


def channel_attention(
    x: Tensor, store: ParameterStore, block: str, cfg: ModelConfig, rng: Optional[np.random.Generator] = None
) -> Tensor:
    """Attention across M at each token position, then residual + LayerNorm. x: [..., M, N, d]."""
    if x.ndim < 3 or x.shape[-3] < 1:
        raise DimensionError(f"channel_attention expects [..., M, N, d], got {x.shape}")
    xt = swap_last(x, -3, -2)  # [..., N, M, d]
    out = swap_last(attention(xt, store, f"{block}.chan", cfg.num_heads), -3, -2)
    return _residual_norm(x, out, store, f"{block}.ln_chan", cfg.dropout, rng)


def time_attention(
    x: Tensor,
    store: ParameterStore,
    block: str,
    cfg: ModelConfig,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Attention across N_tok within each channel, then residual + LayerNorm. x: [..., M, N, d]."""
    N = x.shape[-2]
    pos = None
    if "backbone.pos_embed" in store:
        table = store["backbone.pos_embed"]
        if N > table.shape[0]:
            raise DimensionError(f"sequence of {N} tokens exceeds positional table of {table.shape[0]}")
        pos = expand(take_slice(table, slice(0, N)), x.shape)
    out = attention(x, store, f"{block}.time", cfg.num_heads, pos)
    return _residual_norm(x, out, store, f"{block}.ln_time", cfg.dropout, rng)


def feed_forward(
    x: Tensor, store: ParameterStore, block: str, cfg: ModelConfig, rng: Optional[np.random.Generator] = None
) -> Tensor:
    with op_scope("ffn"):
        hdn = matmul(x, store[f"{block}.ffn.w1"])
        hdn = gelu(add(hdn, expand(store[f"{block}.ffn.b1"], hdn.shape)))
        out = matmul(hdn, store[f"{block}.ffn.w2"])
        out = add(out, expand(store[f"{block}.ffn.b2"], out.shape))
    return _residual_norm(x, out, store, f"{block}.ln_ffn", cfg.dropout, rng)


def esat_block(x: Tensor, store: ParameterStore, i: int, cfg: ModelConfig, rng=None) -> Tensor:
    block = block_prefix(i)
    x = channel_attention(x, store, block, cfg, rng)
    x = time_attention(x, store, block, cfg, rng)
    return feed_forward(x, store, block, cfg, rng)


def esat_forward(
    tok,
    store: ParameterStore,
    cfg: ModelConfig,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """num_layers blocks in order; accepts a TokenSequence or a raw token Tensor."""
    x = tok.tokens if isinstance(tok, TokenSequence) else tok
    for i in range(cfg.num_layers):
        x = esat_block(x, store, i, cfg, rng)
    return x


# -----------------------------
# Heads / decoding
# -----------------------------


def _head_series(h: Tensor, tok: TokenSequence, head: str, store: ParameterStore, channels: Sequence[int]) -> Tensor:
    """Patch tokens of `channels` -> [..., C, span] via head `head` and overlap-average."""
    patch = take_slice(h, (Ellipsis, tok.sections.patch, slice(None)))  # [..., M, P, d]
    if list(channels) != list(range(tok.num_channels)):
        patch = index_select(patch, -3, channels)
    with op_scope("head"):
        y = matmul(patch, store[f"heads.{head}.weight"])  # [..., C, P, pl]
        y = add(y, expand(store[f"heads.{head}.bias"], y.shape))
    return fold(y, tok.stride)


def _channel_stats(tok: TokenSequence, idx: Sequence[int], span: int, dtype) -> Tuple[Tensor, Tensor]:
    mu = tok.mu[..., idx]
    sigma = tok.sigma[..., idx]
    shape = mu.shape + (span,)
    return (
        Tensor(np.broadcast_to(mu[..., None], shape), dtype=dtype),
        Tensor(np.broadcast_to(sigma[..., None], shape), dtype=dtype),
    )


def decode_bp(
    h: Tensor,
    tok: TokenSequence,
    baseline_channels: Sequence,
    store: ParameterStore,
    normalized: bool = False,
) -> Tensor:
    """Baseline prediction [..., C, span]; signal units unless `normalized`."""
    if not baseline_channels:
        raise ConfigError("decode_bp: no baseline channels given")
    idx = tok.channel_indices(baseline_channels)
    y = _head_series(h, tok, "bp", store, idx)
    if normalized:
        return y
    mu, sigma = _channel_stats(tok, idx, y.shape[-1], y.data.dtype)
    return add(mul(y, sigma), mu)


def decode_ad(h: Tensor, tok: TokenSequence, anomaly_channels: Sequence, store: ParameterStore) -> Tensor:
    """Per-timestep anomaly scores in (0, 1), [..., C, span] (C = 1 by default)."""
    idx = tok.channel_indices(anomaly_channels)
    return sigmoid(_head_series(h, tok, "ad", store, idx))


def decode_recon(h: Tensor, tok: TokenSequence, store: ParameterStore) -> Tensor:
    """Normalized reconstruction of every channel, [..., M, span]."""
    return _head_series(h, tok, "recon", store, list(range(tok.num_channels)))


# -----------------------------
# FleetModel
# -----------------------------


@dataclass
class FleetModel:
    cfg: RunConfig
    store: ParameterStore
    pools: TokenPools
    fleets: Dict[str, FleetSpec] = field(default_factory=dict)

    @classmethod
    def build(
        cls,
        cfg: RunConfig,
        fleets: Sequence[FleetSpec],
        rng: np.random.Generator,
        seed: int = 0,
    ) -> "FleetModel":
        """Fresh parameters: tokenizer, backbone, heads, then one pool set per fleet."""
        tk, md = cfg.tokenizer, cfg.model
        if tk.model_dim != md.model_dim:
            raise ConfigError(f"tokenizer.model_dim {tk.model_dim} != model.model_dim {md.model_dim}")
        store = ParameterStore(seed=seed)
        init_tokenizer_params(store, tk, rng)
        init_backbone_params(store, md, cls.n_tok_for(cfg), rng)
        init_head_params(store, md.model_dim, tk.patch_len, rng)
        model = cls(cfg=cfg, store=store, pools=TokenPools(store, tk))
        for f in fleets:
            model.register_fleet(f, rng)
        return model

    @classmethod
    def from_store(cls, cfg: RunConfig, store: ParameterStore, fleets: Sequence[FleetSpec] = ()) -> "FleetModel":
        model = cls(cfg=cfg, store=store, pools=TokenPools(store, cfg.tokenizer))
        for f in fleets:
            model.fleets[f.fleet_id] = f
        return model

    @staticmethod
    def n_tok_for(cfg: RunConfig) -> int:
        tk = cfg.tokenizer
        P = patch_count(cfg.data.window_len, tk.patch_len, tk.stride)
        return tk.prompt_len + P + 2 + tk.task_len

    def register_fleet(self, fleet: FleetSpec, rng: np.random.Generator, trainable: bool = True) -> List[str]:
        self.fleets[fleet.fleet_id] = fleet
        return self.pools.register_fleet(fleet, rng, trainable)

    # --- parameter groups ---
    def pool_names(self, fleet_id: str) -> List[str]:
        return self.pools.names_for(self.fleets[fleet_id]) if fleet_id in self.fleets else []

    def shared_names(self) -> List[str]:
        return [n for n in self.store.names() if not n.startswith("pool.")]

    def head_names(self, heads: Sequence[str] = FINETUNE_HEADS) -> List[str]:
        return [n for n in self.store.names() if any(n.startswith(f"heads.{h}.") for h in heads)]

    def encoder_names(self) -> List[str]:
        """Everything except the bp/ad heads."""
        excluded = set(self.head_names())
        return [n for n in self.store.names() if n not in excluded]

    def active_names(self, fleet_id: str, heads: Sequence[str]) -> Set[str]:
        """Parameters a step on `fleet_id` using `heads` reaches."""
        unused = {f"heads.{h}." for h in HEADS if h not in heads}
        shared = [n for n in self.shared_names() if not any(n.startswith(u) for u in unused)]
        return set(shared) | set(self.pool_names(fleet_id))

    # --- forward ---
    def fleet(self, fleet_id: str) -> FleetSpec:
        if fleet_id not in self.fleets:
            raise ConfigError(f"fleet {fleet_id!r} is not registered with the model")
        return self.fleets[fleet_id]

    def tokenize(self, windows: Sequence[SignalWindow], fleet: FleetSpec) -> TokenSequence:
        return tokenize_batch(windows, fleet, self.pools, self.cfg.tokenizer)

    def encode(
        self,
        windows: Sequence[SignalWindow],
        fleet: FleetSpec,
        hidden_channels: Sequence = (),
        rng: Optional[np.random.Generator] = None,
    ) -> Tuple[TokenSequence, Tensor]:
        """
        Tokenize -> (optional hidden channels) -> backbone.
        Patch tokens of hidden channels are replaced by the fleet's first task token.
        """
        tok = self.tokenize(windows, fleet)
        if hidden_channels:
            task = self.pools.task(fleet.fleet_id)
            tok = hide_channels(tok, hidden_channels, take_slice(task, 0))
        return tok, esat_forward(tok, self.store, self.cfg.model, rng)

    def parameter_breakdown(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for name, t in self.store.items():
            group = name.split(".")[0] if not name.startswith("heads.") else ".".join(name.split(".")[:2])
            out[group] = out.get(group, 0) + t.size
        return out

