"""
Tests for fleet_pretrain: mask plans, masking, masked reconstruction loss
and the pretraining loop.
"""

import numpy as np
import pytest

from fleet_data import drop_labels, fleet_spec, generate_fleet, make_windows
from fleet_errors import ConfigError, DimensionError
from fleet_model import FleetModel
from fleet_pretrain import (
    MaskPlan,
    apply_mask,
    fast_forward,
    fit_single_batch,
    masked_per_channel,
    masked_step_loss,
    mstm_loss,
    pretrain_epoch,
    pretrain_run,
    resume_epoch,
    steps_per_epoch,
)
from fleet_tensor import Tensor, backward
from fleet_tokenizer import prompt_name, task_name
from fleet_training import OptimizerState, seed_all


@pytest.fixture
def source_windows(tiny_cfg):
    spec = fleet_spec("tiny_a")
    ds = drop_labels(generate_fleet(spec, tiny_cfg.data.points, 0, tiny_cfg.data.window_len))
    return make_windows(ds, tiny_cfg.data.window_len)


@pytest.fixture
def source_model(f64, tiny_cfg):
    return FleetModel.build(tiny_cfg, [fleet_spec("tiny_a")], np.random.default_rng(0))


@pytest.fixture
def two_fleets(tiny_cfg):
    """Unlabeled windows of both tiny fleets."""
    L = tiny_cfg.data.window_len
    out = {}
    for fid in ("tiny_a", "tiny_b"):
        ds = drop_labels(generate_fleet(fleet_spec(fid), tiny_cfg.data.points, 0, L))
        out[fid] = make_windows(ds, L)[:4]
    return out


# ============================================================================
# MaskPlan
# ============================================================================


class TestMaskPlan:
    """Per-channel masked patch counts and reproducibility."""

    @pytest.mark.parametrize("P,ratio,k", [(16, 0.3, 5), (4, 0.3, 1), (2, 0.3, 1), (4, 0.9, 3), (10, 0.25, 3)])
    def test_masked_count(self, P, ratio, k):
        assert masked_per_channel(P, ratio) == k

    def test_single_patch_rejected(self):
        with pytest.raises(ConfigError):
            masked_per_channel(1, 0.3)

    def test_every_channel_loses_k_patches(self):
        plan = MaskPlan.generate(3, M=5, P=16, ratio=0.3, patch_len=4, stride=4, batch=2)
        assert plan.mask.shape == (2, 5, 16)
        np.testing.assert_array_equal((plan.mask == 0).sum(axis=-1), np.full((2, 5), 5))

    def test_regenerated_from_seed(self):
        a = MaskPlan.generate(42, M=3, P=8, ratio=0.3, patch_len=4, stride=4)
        b = MaskPlan.generate(42, M=3, P=8, ratio=0.3, patch_len=4, stride=4)
        c = MaskPlan.generate(43, M=3, P=8, ratio=0.3, patch_len=4, stride=4)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert not np.array_equal(a.mask, c.mask)

    def test_sample_mask_covers_masked_patches(self):
        plan = MaskPlan(np.array([[1, 0, 1, 1]], dtype=np.int8), 0.25, 0, patch_len=4, stride=4)
        sel = plan.sample_mask(16)
        np.testing.assert_array_equal(np.flatnonzero(sel[0]), np.arange(4, 8))


# ============================================================================
# Masking
# ============================================================================


class TestApplyMask:
    """Masked patch tokens become the task token; everything else is untouched."""

    def test_all_visible_is_identity(self, tiny_model, tiny_fleet, tiny_windows):
        tok = tiny_model.tokenize(tiny_windows[:2], tiny_fleet)
        plan = MaskPlan.visible(tok.tokens.shape[:-2] + (tok.patch_count,), tok.patch_len, tok.stride)
        out = apply_mask(tok, plan, tiny_model.pools.task(tiny_fleet.fleet_id))
        np.testing.assert_array_equal(out.tokens.data, tok.tokens.data)

    def test_all_but_one_masked(self, tiny_model, tiny_fleet, tiny_windows):
        tok = tiny_model.tokenize(tiny_windows[:1], tiny_fleet)
        M, P = tok.num_channels, tok.patch_count
        mask = np.zeros((1, M, P), dtype=np.int8)
        mask[..., 0] = 1
        task = tiny_model.pools.task(tiny_fleet.fleet_id)
        out = apply_mask(tok, MaskPlan(mask, 0.75, 0, tok.patch_len, tok.stride), task)
        patch = out.tokens.data[0][:, tok.sections.patch]
        hits = np.all(patch == task.data[0], axis=-1).sum(axis=-1)
        np.testing.assert_array_equal(hits, np.full(M, P - 1))
        for name in ("prompt", "stat", "task"):
            sl = getattr(tok.sections, name)
            np.testing.assert_array_equal(out.tokens.data[..., sl, :], tok.tokens.data[..., sl, :])
        assert out.plan is not None

    def test_idempotent(self, tiny_model, tiny_fleet, tiny_windows):
        tok = tiny_model.tokenize(tiny_windows[:2], tiny_fleet)
        plan = MaskPlan.generate(5, tok.num_channels, tok.patch_count, 0.3, tok.patch_len, tok.stride, batch=2)
        task = tiny_model.pools.task(tiny_fleet.fleet_id)
        once = apply_mask(tok, plan, task)
        twice = apply_mask(once, plan, task)
        np.testing.assert_array_equal(once.tokens.data, twice.tokens.data)

    def test_shape_mismatch(self, tiny_model, tiny_fleet, tiny_windows):
        tok = tiny_model.tokenize(tiny_windows[:2], tiny_fleet)
        plan = MaskPlan.generate(5, tok.num_channels, tok.patch_count, 0.3, tok.patch_len, tok.stride)
        with pytest.raises(DimensionError):
            apply_mask(tok, plan, tiny_model.pools.task(tiny_fleet.fleet_id))


# ============================================================================
# Masked reconstruction loss
# ============================================================================


class TestMstmLoss:
    """MSE over masked samples only."""

    @pytest.fixture
    def plan(self):
        return MaskPlan(np.array([[1, 0, 1, 1], [1, 1, 1, 1]], dtype=np.int8), 0.25, 0, patch_len=4, stride=4)

    def test_perfect_reconstruction(self, f64, plan):
        x = np.random.default_rng(0).normal(size=(2, 16))
        assert mstm_loss(x, Tensor(x.copy()), plan).item() == 0.0

    def test_unit_offset_on_masked_patch(self, f64, plan):
        x = np.random.default_rng(1).normal(size=(2, 16))
        x_hat = x.copy()
        x_hat[0, 4:8] += 1.0
        x_hat[1] += 3.0  # never masked
        assert mstm_loss(x, Tensor(x_hat), plan).item() == pytest.approx(1.0, abs=1e-12)

    def test_zero_gradient_outside_mask(self, f64, plan):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 16))
        x_hat = Tensor(rng.normal(size=(2, 16)), requires_grad=True)
        backward(mstm_loss(x, x_hat, plan))
        sel = plan.sample_mask(16)
        assert np.all(x_hat.grad[~sel] == 0.0)
        assert np.all(x_hat.grad[sel] != 0.0)


# ============================================================================
# Training loop
# ============================================================================


class TestPretrainLoop:
    """Epoch loop, determinism, resumption, frozen fine-tuning heads."""

    def test_same_seed_same_history(self, f64, tiny_cfg, source_windows):
        losses = []
        for _ in range(2):
            streams = seed_all(5)
            model = FleetModel.build(tiny_cfg, [fleet_spec("tiny_a")], streams.init, 5)
            result = pretrain_run(model, {"tiny_a": source_windows}, streams, epochs=2, out=None)
            losses.append([s.fleet_loss["tiny_a"] for s in result.history])
        assert losses[0] == losses[1]

    def test_resume_continues_step_counter(self, source_model, source_windows):
        streams = seed_all(0)
        first = pretrain_run(source_model, {"tiny_a": source_windows}, streams, epochs=1, out=None)
        steps = first.state.step
        assert steps == first.history[0].steps > 0
        second = pretrain_run(source_model, {"tiny_a": source_windows}, streams, epochs=1, state=first.state, start_epoch=1, out=None)
        assert second.state.step == 2 * steps
        assert second.history[0].epoch == 1

    def test_bp_and_ad_heads_untouched(self, source_model, source_windows):
        heads = source_model.head_names()
        before = source_model.store.digest(heads)
        pretrain_run(source_model, {"tiny_a": source_windows}, seed_all(0), epochs=1, out=None)
        assert source_model.store.digest(heads) == before

    def test_progress_lines(self, source_model, source_windows):
        lines = []
        pretrain_run(source_model, {"tiny_a": source_windows}, seed_all(0), epochs=1, out=lines.append)
        assert lines and all(line.startswith("0,tiny_a,") for line in lines)

    def test_single_batch_overfit(self, source_model, source_windows):
        first, last = fit_single_batch(source_model, source_windows[:2], "tiny_a", steps=200, plan_seed=1, lr=1e-2)
        assert last < 0.25 * first

    def test_different_mask_seeds_give_different_losses(self, source_model, source_windows):
        a = masked_step_loss(source_model, source_windows[:2], "tiny_a", plan_seed=1).item()
        b = masked_step_loss(source_model, source_windows[:2], "tiny_a", plan_seed=2).item()
        c = masked_step_loss(source_model, source_windows[:2], "tiny_a", plan_seed=1).item()
        assert a == c
        assert a != b

    def test_loss_falls_over_several_epochs(self, f64, tiny_cfg, source_windows):
        tiny_cfg.training.lr = 1e-2
        model = FleetModel.build(tiny_cfg, [fleet_spec("tiny_a")], np.random.default_rng(0))
        result = pretrain_run(model, {"tiny_a": source_windows}, seed_all(0), epochs=10, out=None)
        assert result.history[-1].mean_loss < result.history[0].mean_loss
        assert result.history[-1].mean_loss < 0.75 * result.initial_loss


class TestMixedFleets:
    """Fleet-homogeneous batches from several fleets in one epoch."""

    def test_every_fleet_pool_moves(self, f64, tiny_cfg, two_fleets):
        model = FleetModel.build(tiny_cfg, [fleet_spec(fid) for fid in two_fleets], np.random.default_rng(0))
        model.store.set_trainable(model.encoder_names())
        before = {}
        for fid in two_fleets:
            prompts = [prompt_name(fid, s) for s in fleet_spec(fid).channel_names]
            before[fid] = (prompts, model.store.digest(prompts), model.store.digest([task_name(fid)]))
        lines = []
        stats = pretrain_epoch(model, two_fleets, OptimizerState.from_config(tiny_cfg.training), seed_all(0), out=lines.append)
        for fid, (prompts, prompt_digest, task_digest) in before.items():
            assert model.store.digest(prompts) != prompt_digest
            assert model.store.digest([task_name(fid)]) != task_digest
        assert set(stats.fleet_loss) == set(two_fleets)
        assert stats.steps == steps_per_epoch(two_fleets, tiny_cfg.training.batch_size) == 4
        assert {line.split(",")[1] for line in lines} == set(two_fleets)


class TestResume:
    """Restarting from a step count continues the same random draws."""

    def test_resume_epoch(self, two_fleets):
        state = OptimizerState()
        state.step = 8
        assert resume_epoch(state, two_fleets, batch_size=2) == 2
        state.step = 9
        assert resume_epoch(state, two_fleets, batch_size=2) == 2

    def test_fast_forward_matches_uninterrupted_run(self, f64, tiny_cfg, two_fleets):
        fleets = [fleet_spec(fid) for fid in two_fleets]
        straight = FleetModel.build(tiny_cfg, fleets, np.random.default_rng(0))
        pretrain_run(straight, two_fleets, seed_all(3), epochs=2, out=None)

        resumed = FleetModel.build(tiny_cfg, fleets, np.random.default_rng(0))
        first = pretrain_run(resumed, two_fleets, seed_all(3), epochs=1, out=None)
        streams = seed_all(3)
        done = resume_epoch(first.state, two_fleets, tiny_cfg.training.batch_size)
        fast_forward(streams, two_fleets, tiny_cfg.training.batch_size, done)
        lines = []
        pretrain_run(resumed, two_fleets, streams, epochs=1, state=first.state, start_epoch=done, out=lines.append)

        assert done == 1
        assert all(line.startswith("1,") for line in lines)
        assert resumed.store.digest() == straight.store.digest()
