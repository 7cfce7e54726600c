import math

import numpy as np
import pytest

from gsir.core import GaussianSet
from gsir.corpus import toy_corpus
from gsir.errors import EmptyCorpusError, InvalidParameterError, ShapeMismatchError
from gsir.metrics import loss_render
from gsir.render import RenderConfig
from gsir.rng import named_rng
from gsir.stagewise import training
from gsir.stagewise.config import DistillWeights, FinetuneConfig, PODConfig, StageControlConfig
from gsir.stagewise.pipeline import run_pipeline
from gsir.stagewise.predictor import HeuristicPredictor, TinyLinearPredictor
from gsir.stagewise.training import (DIRECT_COLUMNS, POD_COLUMNS, active_stages, angular_distance, direct_train,
                                     evaluate_prefix_losses, finetune_gradients, finetune_train,
                                     gaussian_distill_loss, load_checkpoint, pod_train, save_checkpoint)

import params
from fixture import rng, tiny, toy_control, toys
from utils import assert_grads_close, perturb, random_set, set_grad_fd

WIDE = RenderConfig(cutoff_sigmas=params.wide_cutoff)


def weights_copy(model):
    return [w.copy() for w in model.weights]


def short_pod(**update):
    cfg = dict(steps=4, K=2, milestones=(0, 2), seed=5)
    cfg.update(update)
    return PODConfig(**cfg)


class TestDistill:
    def test_angular_distance(self):
        assert angular_distance(0.05, math.pi - 0.05) == pytest.approx(0.10)
        assert angular_distance(1.0, 1.0) == 0.0

    def test_zero_for_identical(self, rng):
        gset = random_set(rng, 5, 16, 16)
        assert gaussian_distill_loss(gset, gset) == 0.0

    def test_mismatch(self, rng):
        with pytest.raises(ShapeMismatchError):
            gaussian_distill_loss(random_set(rng, 3, 16, 16), random_set(rng, 4, 16, 16))

    def test_empty(self):
        assert gaussian_distill_loss(GaussianSet.empty(), GaussianSet.empty()) == 0.0

    def test_theta_wraps(self):
        a = GaussianSet(mu=[[0.0, 0.0]], log_scale=[[0.0, 0.0]], theta=[0.02], color=[[0.0, 0.0, 0.0]])
        b = a.replace(theta=[math.pi - 0.02])
        w = DistillWeights()
        assert gaussian_distill_loss(a, b) == pytest.approx(w.theta * 0.04 ** 2)

    def test_gradient(self, rng):
        target = random_set(rng, 6, 16, 16)
        pred = perturb(rng, target)
        _, grads = gaussian_distill_loss(pred, target, with_grad=True)
        assert_grads_close(grads, set_grad_fd(lambda g: gaussian_distill_loss(g, target), pred))

    def test_sum_reduction(self, rng):
        target = random_set(rng, 6, 16, 16)
        pred = perturb(rng, target)
        mean = gaussian_distill_loss(pred, target)
        assert gaussian_distill_loss(pred, target, reduction="sum") == pytest.approx(6 * mean)
        _, grads = gaussian_distill_loss(pred, target, with_grad=True, reduction="sum")
        assert_grads_close(grads, set_grad_fd(lambda g: gaussian_distill_loss(g, target, reduction="sum"), pred))
        with pytest.raises(InvalidParameterError):
            gaussian_distill_loss(pred, target, reduction="max")


class TestSchedule:
    def test_active_stages(self):
        assert active_stages(0, (0, 5), 2) == 1
        assert active_stages(5, (0, 5), 2) == 2
        assert active_stages(100, (0, 5, 10), 2) == 2
        assert active_stages(0, (0, 0), 2) == 2


class TestPod:
    def test_input_errors(self, tiny, toy_control, toys):
        with pytest.raises(EmptyCorpusError):
            pod_train(tiny, [], short_pod(), toy_control)
        with pytest.raises(InvalidParameterError):
            pod_train(HeuristicPredictor(8), toys, short_pod(), toy_control)
        with pytest.raises(ShapeMismatchError):
            pod_train(tiny, toys, short_pod(), StageControlConfig(patch_size=7, n_stages=2))
        with pytest.raises(ShapeMismatchError):
            pod_train(tiny, toys, short_pod(), StageControlConfig(patch_size=8, n_stages=3))

    def test_no_refinement_keeps_weights(self, tiny, toy_control, toys):
        before = weights_copy(tiny)
        result = pod_train(tiny, toys, short_pod(K=0, milestones=(0, 0)), toy_control)
        for a, b in zip(result.model.weights, before):
            np.testing.assert_array_equal(a, b)
        assert (result.log["distill_loss"] == 0.0).all()

    def test_milestone_copies_previous_stage(self, tiny, toy_control, toys):
        tiny.weights[1] = np.zeros_like(tiny.weights[1])
        first = tiny.weights[0].copy()
        result = pod_train(tiny, toys, short_pod(K=0, steps=2, milestones=(0, 1)), toy_control)
        assert list(result.log["stages"]) == [1, 2]
        np.testing.assert_array_equal(result.model.weights[1], first)

    def test_short_run(self, tiny, toy_control, toys):
        result = pod_train(tiny, toys, short_pod(), toy_control)
        frame = result.log
        assert list(frame.columns) == POD_COLUMNS
        assert len(frame) == 4
        assert np.all(np.isfinite(frame["total"]))
        assert result.state.step == 4
        assert (frame["count"] > 0).all()

    def test_resume_is_exact(self, tmp_path, toy_control, toys):
        def fresh():
            return TinyLinearPredictor.initialize(8, 2, named_rng(0, "tiny-init"))

        straight = pod_train(fresh(), toys, short_pod(steps=6), toy_control)

        path = tmp_path / "pod.npz"
        pod_train(fresh(), toys, short_pod(steps=3, checkpoint_every=3), toy_control, checkpoint_path=path)
        model, state, mode = load_checkpoint(path)
        assert mode == "pod" and state.step == 3
        resumed = pod_train(model, toys, short_pod(steps=6), toy_control, resume=state)
        for a, b in zip(resumed.model.weights, straight.model.weights):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(resumed.log["total"].to_numpy(), straight.log["total"].to_numpy()[3:])

    def test_refinement_uses_gradient_steps(self):
        assert PODConfig().refine.method == "gd"

    def test_distill_is_stage_average(self, tiny, toy_control, toys):
        cfg = short_pod()
        row1, _ = training.pod_step(tiny, toys[0], cfg, toy_control, 1)
        row2, _ = training.pod_step(tiny, toys[0], cfg, toy_control, 2)
        assert row2["count"] > row1["count"]
        # total sums the stages, the logged distill loss averages them
        second = row2["total"] / cfg.distill_weight - row1["distill_loss"]
        assert row2["distill_loss"] == pytest.approx((row1["distill_loss"] + second) / 2)

    @pytest.mark.slow
    def test_distill_loss_falls(self):
        control = StageControlConfig(patch_size=14, n_stages=2)
        corpus = toy_corpus(32, params.toy_size, seed=11)
        model = TinyLinearPredictor.initialize(14, 2, named_rng(0, "tiny-init"))
        frame = pod_train(model, corpus, PODConfig(steps=2000, K=10), control).log
        assert len(frame) == 2000
        assert np.all(np.isfinite(frame[["distill_loss", "render_loss", "total"]].to_numpy()))
        d = frame["distill_loss"].to_numpy()
        assert d[-1] < 0.2 * d[10]


class TestCheckpoint:
    def test_round_trip(self, tmp_path, tiny, toy_control, toys):
        result = pod_train(tiny, toys, short_pod(steps=2), toy_control)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, result.model, result.state, "pod")
        model, state, mode = load_checkpoint(path)
        assert mode == "pod"
        assert (state.step, state.active) == (result.state.step, result.state.active)
        assert state.optimizer.t == result.state.optimizer.t
        for a, b in zip(model.weights, result.model.weights):
            np.testing.assert_array_equal(a, b)


class TestFinetune:
    def test_single_stage_is_render_loss(self, tiny, toys):
        control = StageControlConfig(patch_size=8, n_stages=1)
        target = toys[0]
        out = finetune_gradients(tiny, target, FinetuneConfig(), control)
        state = run_pipeline(target, tiny, control)
        assert out.loss == pytest.approx(loss_render(state.render, target).total, abs=1e-12)
        assert len(out.prefix_losses) == 1

    def test_ablation_changes_only_earlier_stages(self, tiny, toy_control, toys):
        target = toys[1]
        full = finetune_gradients(tiny, target, FinetuneConfig(), toy_control)
        local = finetune_gradients(tiny, target, FinetuneConfig(through_residual=False), toy_control)
        assert full.loss == local.loss
        np.testing.assert_allclose(full.grads[2], local.grads[2])
        assert not np.allclose(full.grads[1], local.grads[1])

    def test_directional_derivative(self, rng, tiny, toy_control, toys):
        target = toys[2]
        cfg = FinetuneConfig()
        out = finetune_gradients(tiny, target, cfg, toy_control, render_cfg=WIDE)
        direction = [rng.normal(size=w.shape) for w in tiny.weights]
        analytic = sum(float(np.sum(out.grads[i + 1] * d)) for i, d in enumerate(direction))

        def loss_at(h):
            model = TinyLinearPredictor([w + h * d for w, d in zip(tiny.weights, direction)], tiny.patch_size)
            return finetune_gradients(model, target, cfg, toy_control, render_cfg=WIDE).loss

        h = 1e-6
        numeric = (loss_at(h) - loss_at(-h)) / (2 * h)
        assert analytic == pytest.approx(numeric, rel=1e-3)

    def test_quant_aware_adds_a_term(self, tiny, toy_control, toys):
        out = finetune_gradients(tiny, toys[0], FinetuneConfig(quant_aware=True), toy_control)
        plain = finetune_gradients(tiny, toys[0], FinetuneConfig(), toy_control)
        assert out.quant_loss >= 0.0
        assert out.loss == pytest.approx(plain.loss + out.quant_loss)

    def test_short_run(self, tiny, toy_control, toys):
        frame = finetune_train(tiny, toys, FinetuneConfig(steps=3), toy_control).log
        assert len(frame) == 3
        assert {"psnr_1", "psnr_2", "final_render_loss"} <= set(frame.columns)
        assert np.all(np.isfinite(frame["total"]))

    @pytest.mark.slow
    def test_finetune_helps_final_stage(self, toy_control, toys):
        pod_only = TinyLinearPredictor.initialize(8, 2, named_rng(0, "tiny-init"))
        pod_train(pod_only, toys, PODConfig(steps=100, K=5, milestones=(0, 50)), toy_control)
        tuned = TinyLinearPredictor([w.copy() for w in pod_only.weights], 8)
        finetune_train(tuned, toys, FinetuneConfig(steps=100), toy_control)
        before = evaluate_prefix_losses(pod_only, toys, toy_control)[:, -1].mean()
        after = evaluate_prefix_losses(tuned, toys, toy_control)[:, -1].mean()
        assert after <= before


class TestDirect:
    def test_short_run(self, tiny, toy_control, toys):
        frame = direct_train(tiny, toys, short_pod(), toy_control).log
        assert list(frame.columns) == DIRECT_COLUMNS
        assert len(frame) == 4

    def test_stops_on_divergence(self, monkeypatch, tiny, toy_control, toys):
        monkeypatch.setattr(training, "residual_objective", lambda pred, *rest: (math.nan, np.zeros_like(pred)))
        frame = direct_train(tiny, toys, short_pod(), toy_control).log
        assert len(frame) == 1
        assert math.isnan(frame["total"].iloc[0])


class TestEvaluate:
    def test_shape(self, tiny, toy_control, toys):
        losses = evaluate_prefix_losses(tiny, toys, toy_control)
        assert losses.shape == (len(toys), toy_control.n_stages)
        assert np.all(np.isfinite(losses))
