"""
Tests for fleet_model: two-stage attention, backbone stack, decoding heads
and the closed-form multiply counts.
"""

import numpy as np
import pytest
from scipy.special import expit

from fleet_config import ModelConfig
from fleet_errors import ConfigError
from fleet_model import (
    FleetModel,
    attention_multiplies,
    block_prefix,
    channel_attention,
    decode_ad,
    decode_bp,
    decode_recon,
    esat_forward,
    init_backbone_params,
    joint_attention_multiplies,
    projection_multiplies,
    time_attention,
)
from fleet_tensor import Tensor, count_multiplies, grad_check, mul, reduce_sum
from fleet_training import ParameterStore


def _ln(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


@pytest.fixture
def block_store(f64):
    """One block at d=8 with a 5-token positional table."""
    store = ParameterStore()
    init_backbone_params(store, ModelConfig(num_layers=1, model_dim=8), n_tok=5, rng=np.random.default_rng(4))
    return store


@pytest.fixture
def block_cfg():
    return ModelConfig(num_layers=1, model_dim=8)


# ============================================================================
# Attention stages
# ============================================================================


class TestChannelAttention:
    """Attention across the channel axis at each token position."""

    def test_single_channel_is_value_path(self, block_store, block_cfg):
        """Softmax over one channel is 1: output = LN(x + x Wv Wo)."""
        p = block_prefix(0)
        x = np.random.default_rng(0).normal(size=(1, 5, 8))
        out = channel_attention(Tensor(x), block_store, p, block_cfg)
        v = x @ block_store[f"{p}.chan.v"].data @ block_store[f"{p}.chan.o"].data
        np.testing.assert_allclose(out.data, _ln(x + v), atol=1e-10)

    def test_identical_channels_get_identical_outputs(self, block_store, block_cfg):
        row = np.random.default_rng(1).normal(size=(5, 8))
        out = channel_attention(Tensor(np.stack([row, row])), block_store, block_prefix(0), block_cfg)
        np.testing.assert_allclose(out.data[0], out.data[1], atol=1e-10)

    def test_shape_and_gradient(self, block_store, block_cfg):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(3, 5, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 5, 8)))
        p = block_prefix(0)
        assert channel_attention(x, block_store, p, block_cfg).shape == (3, 5, 8)
        weights = [block_store[f"{p}.chan.q"], block_store[f"{p}.chan.v"]]
        errors = grad_check(lambda: reduce_sum(mul(channel_attention(x, block_store, p, block_cfg), w)), [x, *weights])
        assert max(errors) <= 1e-4


class TestTimeAttention:
    """Attention across the token axis within each channel."""

    def test_single_token_is_value_path(self, block_store, block_cfg):
        """With one token the positional embedding only reaches Q and K, so it has no effect."""
        p = block_prefix(0)
        x = np.random.default_rng(3).normal(size=(3, 1, 8))
        out = time_attention(Tensor(x), block_store, p, block_cfg)
        v = x @ block_store[f"{p}.time.v"].data @ block_store[f"{p}.time.o"].data
        np.testing.assert_allclose(out.data, _ln(x + v), atol=1e-10)

    def test_channel_permutation_equivariance(self, block_store, block_cfg):
        x = np.random.default_rng(5).normal(size=(4, 5, 8))
        perm = [2, 0, 3, 1]
        p = block_prefix(0)
        a = time_attention(Tensor(x), block_store, p, block_cfg).data
        b = time_attention(Tensor(x[perm]), block_store, p, block_cfg).data
        np.testing.assert_allclose(a[perm], b, atol=1e-10)

    def test_shape_and_gradient(self, block_store, block_cfg):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(2, 5, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 5, 8)))
        p = block_prefix(0)
        assert time_attention(x, block_store, p, block_cfg).shape == (2, 5, 8)
        weights = [block_store[f"{p}.time.k"], block_store["backbone.pos_embed"]]
        errors = grad_check(lambda: reduce_sum(mul(time_attention(x, block_store, p, block_cfg), w)), [x, *weights])
        assert max(errors) <= 1e-4


# ============================================================================
# Backbone
# ============================================================================


class TestBackbone:
    """Stacked blocks, determinism, multiply counts."""

    def test_zero_layers_is_identity(self, f64, tiny_cfg, tiny_fleet, tiny_windows):
        tiny_cfg.model.num_layers = 0
        model = FleetModel.build(tiny_cfg, [tiny_fleet], np.random.default_rng(0))
        tok = model.tokenize(tiny_windows[:2], tiny_fleet)
        h = esat_forward(tok, model.store, tiny_cfg.model)
        np.testing.assert_array_equal(h.data, tok.tokens.data)

    def test_deterministic_under_seed(self, f64, tiny_cfg, tiny_fleet, tiny_windows):
        outs = []
        for _ in range(2):
            model = FleetModel.build(tiny_cfg, [tiny_fleet], np.random.default_rng(11))
            outs.append(model.encode(tiny_windows[:2], tiny_fleet)[1].data)
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_attention_multiplies_match_closed_form(self, tiny_model, tiny_fleet, tiny_windows, tiny_cfg):
        batch = tiny_windows[:2]
        with count_multiplies() as counter:
            tok, _ = tiny_model.encode(batch, tiny_fleet)
        B, M, N, d = tok.tokens.shape
        layers = tiny_cfg.model.num_layers
        assert counter.get("attention_core") == layers * B * attention_multiplies(M, N, d)
        assert counter.get("projection") == layers * B * projection_multiplies(M, N, d)

    def test_two_stage_is_cheaper_than_joint_attention(self):
        M, N, d = 17, 29, 512
        assert attention_multiplies(M, N, d) < joint_attention_multiplies(M, N, d)
        assert joint_attention_multiplies(16, 16, 32) >= 4 * attention_multiplies(16, 16, 32)

    def test_heads_must_divide_width(self, tiny_cfg):
        tiny_cfg.model.num_heads = 3
        with pytest.raises(ConfigError):
            init_backbone_params(ParameterStore(), tiny_cfg.model, 8, np.random.default_rng(0))


# ============================================================================
# Decoding heads
# ============================================================================


class TestDecoding:
    """BP/AD/reconstruction heads on patch tokens."""

    def _zero_heads(self, model, head):
        model.store[f"heads.{head}.weight"].data[...] = 0.0
        model.store[f"heads.{head}.bias"].data[...] = 0.0

    def test_bp_with_zero_head_returns_channel_mean(self, tiny_model, tiny_fleet, tiny_windows):
        self._zero_heads(tiny_model, "bp")
        tok, h = tiny_model.encode(tiny_windows[:2], tiny_fleet)
        y = decode_bp(h, tok, [tiny_fleet.baseline_name], tiny_model.store)
        assert y.shape == (2, 1, tok.span)
        expected = np.broadcast_to(tok.mu[:, [tiny_fleet.baseline_channel], None], y.shape)
        np.testing.assert_allclose(y.data, expected, atol=1e-10)

    def test_bp_unknown_channel(self, tiny_model, tiny_fleet, tiny_windows):
        tok, h = tiny_model.encode(tiny_windows[:1], tiny_fleet)
        with pytest.raises(ConfigError):
            decode_bp(h, tok, ["no_such_sensor"], tiny_model.store)

    def test_ad_zero_head_scores_one_half(self, tiny_model, tiny_fleet, tiny_windows):
        self._zero_heads(tiny_model, "ad")
        tok, h = tiny_model.encode(tiny_windows[:2], tiny_fleet)
        scores = decode_ad(h, tok, [0], tiny_model.store)
        np.testing.assert_array_equal(scores.data, np.full((2, 1, tok.span), 0.5))

    def test_ad_scores_in_open_interval(self, tiny_model, tiny_fleet, tiny_windows):
        tok, h = tiny_model.encode(tiny_windows[:3], tiny_fleet)
        scores = decode_ad(h, tok, [0], tiny_model.store).data
        assert np.all((scores > 0.0) & (scores < 1.0))

    def test_ad_matches_manual_head(self, tiny_model, tiny_fleet, tiny_windows):
        tok, h = tiny_model.encode(tiny_windows[:1], tiny_fleet)
        scores = decode_ad(h, tok, [0], tiny_model.store).data
        patch = h.data[0, 0, tok.sections.patch]
        w, b = tiny_model.store["heads.ad.weight"].data, tiny_model.store["heads.ad.bias"].data
        np.testing.assert_allclose(scores[0, 0], expit(patch @ w + b).reshape(-1), atol=1e-12)

    def test_recon_shape(self, tiny_model, tiny_fleet, tiny_windows, tiny_cfg):
        tok, h = tiny_model.encode(tiny_windows[:2], tiny_fleet)
        x_hat = decode_recon(h, tok, tiny_model.store)
        P = tok.patch_count
        assert x_hat.shape == (2, tiny_fleet.num_channels, P * tiny_cfg.tokenizer.patch_len)


class TestParameterGroups:
    """Name groups used by freezing and checkpoint compatibility."""

    def test_groups_partition_the_store(self, tiny_model, tiny_fleet):
        names = set(tiny_model.store.names())
        heads = set(tiny_model.head_names())
        assert heads == {"heads.bp.weight", "heads.bp.bias", "heads.ad.weight", "heads.ad.bias"}
        assert set(tiny_model.encoder_names()) == names - heads
        pools = set(tiny_model.pool_names(tiny_fleet.fleet_id))
        assert set(tiny_model.shared_names()) == names - pools

    def test_breakdown_sums_to_total(self, tiny_model):
        assert sum(tiny_model.parameter_breakdown().values()) == sum(t.size for _, t in tiny_model.store.items())
