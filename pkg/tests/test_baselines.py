import math

import numpy as np
import pytest
import torch

from nowcast.baselines import (BaselineForecast, convlstm_rollout, convlstm_rollout_batch, external_ensemble,
                               persistence_forecast, train_convlstm_step)
from nowcast.data import NormalizationSpec, SyntheticConfig, stack_sequences, synth_advection
from nowcast.dyffusion import SequenceBatch, iterate_batches
from nowcast.losses import LcbConfig, LossSpec, cb_loss
from nowcast.metrics import evaluate_rollout
from nowcast.networks import ConvLSTM, ConvLSTMConfig

SPEC = NormalizationSpec.analytic(100.0)
CL = ConvLSTMConfig(hidden_channels=8, kernel=3)


def _seqs(n=4, velocity=(1.0, 0.0), seed=0, size=16):
    return synth_advection(SyntheticConfig(seed=seed, n_sequences=n, size=size, n_blobs=2, sigma_range=(1.5, 2.5),
                                           advection_velocity=velocity, context=4), SPEC)


class OracleConvLSTM:
    """Returns the ground-truth frame that follows whatever window it is given."""

    cfg = ConvLSTMConfig(hidden_channels=4, kernel=3)

    def __init__(self, frames):
        self.frames = frames

    def __call__(self, context, dropout_on=False, generator=None):
        T = context.shape[1]
        for k in range(self.frames.shape[1] - T):
            if torch.equal(self.frames[:, k:k + T], context):
                return self.frames[:, k + T]
        raise AssertionError("window not found")


class TestPersistence:
    def test_frames_equal_x0(self, rng):
        x0 = rng.uniform(0, 1, (1, 8, 8)).astype(np.float32)
        f = persistence_forecast(x0, 8)
        assert f.frames.shape == (8, 1, 8, 8)
        for k in range(8):
            assert f.frames[k].tobytes() == x0.tobytes()

    def test_static_exact(self):
        s = _seqs(1, velocity=(0.0, 0.0))[0]
        rep = evaluate_rollout(persistence_forecast(s.x0, s.h), s, SPEC)
        assert rep.averaged["mse"] == 0.0
        for k in ("csi_2", "csi_10", "csi_18"):
            assert all(r[k] == 1.0 or math.isnan(r[k]) for r in rep.per_lead.values())

    def test_csi_declines_with_lead(self):
        s = synth_advection(SyntheticConfig(seed=2, n_sequences=1, size=64, n_blobs=3, context=4,
                                            advection_velocity=(1.0, 0.5)), SPEC)[0]
        rep = evaluate_rollout(persistence_forecast(s.x0, s.h), s, SPEC)
        curve = [rep.per_lead[30 * k]["csi_2"] for k in range(1, 9)]
        assert all(b < a for a, b in zip(curve, curve[1:])), curve

    def test_bad_tag(self):
        with pytest.raises(ValueError):
            BaselineForecast(np.zeros((8, 1, 4, 4)), "steps")


class TestConvLstmTraining:
    def test_oracle_fixed_points(self):
        frames = torch.from_numpy(stack_sequences(_seqs(3))).double()
        oracle = OracleConvLSTM(frames)
        lcb = train_convlstm_step(oracle, SequenceBatch(frames, 4), LossSpec("lcb"), torch.Generator().manual_seed(0))
        assert lcb.item() == 0.0
        g = torch.Generator().manual_seed(1)
        bce = train_convlstm_step(oracle, SequenceBatch(frames, 4), LossSpec("bce"), g)
        # replay the same offset draw to find the target frame and its entropy
        k = int(torch.randint(0, frames.shape[1] - 4, (1,), generator=torch.Generator().manual_seed(1)))
        t = frames[:, k + 4].numpy()
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = -(np.where(t > 0, t * np.log(t), 0.0) + np.where(t < 1, (1 - t) * np.log1p(-t), 0.0))
        assert bce.item() == pytest.approx(ent.mean(), rel=1e-9)
        assert bce.item() > 0

    def test_alpha_one_is_cb_supervision(self):
        frames = torch.from_numpy(stack_sequences(_seqs(2)))
        torch.manual_seed(0)
        model = ConvLSTM(CL)
        spec_a1 = LossSpec("lcb", lcb=LcbConfig(alpha=1.0))
        got = train_convlstm_step(model, SequenceBatch(frames, 4), spec_a1, torch.Generator().manual_seed(4), SPEC)
        g = torch.Generator().manual_seed(4)
        k = int(torch.randint(0, frames.shape[1] - 4, (1,), generator=g))
        pred = model(frames[:, k:k + 4], dropout_on=True, generator=g)
        assert got.item() == pytest.approx(cb_loss(pred, frames[:, k + 4], LcbConfig(alpha=1.0), SPEC).item(), rel=1e-6)

    def test_insufficient_context(self):
        frames = torch.rand(2, 4, 1, 8, 8)
        with pytest.raises(ValueError):
            train_convlstm_step(ConvLSTM(CL), SequenceBatch(frames, 4), LossSpec(), torch.Generator())

    @pytest.mark.parametrize("kind", ["lcb", "bce"])
    def test_smoke_training(self, kind):
        torch.manual_seed(0)
        data = stack_sequences(_seqs(20))
        model = ConvLSTM(CL)
        opt = torch.optim.Adam(model.parameters(), lr=3e-3)
        gen = torch.Generator().manual_seed(0)
        losses, epoch = [], 0
        while len(losses) < 50:
            for fr in iterate_batches(data, 4, epoch, 0):
                opt.zero_grad()
                loss = train_convlstm_step(model, SequenceBatch(fr, 4), LossSpec(kind), gen)
                loss.backward()
                opt.step()
                losses.append(loss.item())
                if len(losses) == 50:
                    break
            epoch += 1
        assert np.mean(losses[-5:]) < 0.8 * losses[0]


class TestConvLstmRollout:
    def test_shape_range_determinism(self):
        torch.manual_seed(0)
        model = ConvLSTM(CL)
        ctx = torch.rand(4, 1, 16, 16)
        a = convlstm_rollout(model, ctx, 8)
        b = convlstm_rollout(model, ctx, 8)
        assert a.frames.shape == (8, 1, 16, 16)
        assert a.frames.min() >= 0 and a.frames.max() <= 1
        assert a.frames.tobytes() == b.frames.tobytes()

    def test_wrong_context(self):
        with pytest.raises(ValueError):
            convlstm_rollout(ConvLSTM(CL), torch.rand(3, 1, 16, 16))

    def test_feedback_perturbation(self):
        torch.manual_seed(0)
        model = ConvLSTM(CL)
        ctx = torch.rand(1, 4, 1, 16, 16)
        base = convlstm_rollout_batch(model, ctx, 8)

        def bump(k, frame):
            return (frame + 0.3).clamp(0, 1) if k == 0 else frame

        hit = convlstm_rollout_batch(model, ctx, 8, hook=bump)
        assert not torch.equal(hit[:, 0], base[:, 0])
        for k in range(1, 8):
            assert not torch.equal(hit[:, k], base[:, k])

    def test_oracle_rollout_matches_truth(self):
        frames = torch.from_numpy(stack_sequences(_seqs(1)))
        out = convlstm_rollout_batch(OracleConvLSTM(frames), frames[:, :4], 8)
        assert torch.equal(out, frames[:, 4:])


def test_external_ensemble_hook():
    def fake(context_mmh, h, members, seed):
        assert context_mmh.shape == (4, 8, 8)
        return np.repeat(np.repeat(context_mmh[-1:][None], h, axis=1), members, axis=0)

    ctx = np.random.default_rng(0).uniform(0, 1, (4, 1, 8, 8))
    f = external_ensemble(fake, ctx, SPEC, h=8, members=3)
    assert f.members.shape == (3, 8, 1, 8, 8)
    np.testing.assert_allclose(f.members[0, 0, 0], ctx[-1, 0], atol=1e-6)

    with pytest.raises(ValueError):
        external_ensemble(lambda c, h, m, s: np.zeros((1, 1, 8, 8)), ctx, SPEC)
