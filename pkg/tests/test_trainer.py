from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from psnir import diffcore as dc
from psnir.domain import ImageStack, Scene
from psnir.psnet import build_input, psnet_features, psnet_normals
from psnir.synth import Material, make_sphere_scene, random_lights
from psnir.trainer import (TraceRecord, TrainConfig, TrainingDiverged, TrainTrace, init_networks,
                           prepare, prior_loss, reconstruction_loss, run_median_protocol,
                           train_prepared, train_scene)


def tiny_config(iters=20, **kw):
    base = dict(total_iters=iters, supervision_iters=min(50, iters), lr_drop_at=min(900, iters),
                ps_channels=8, ir_channels=4)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def glossy():
    return make_sphere_scene(0.9, 12, random_lights(6, 0, 45.0), Material(1.0, 0.4, 10.0))


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.total_iters, cfg.lr, cfg.lr_drop_at, cfg.supervision_iters) == (1000, 8e-4, 900, 50)
        assert cfg.loss_dropout_rate == 0.9 and cfg.repeat_runs == 11

    def test_lambda_schedule(self):
        cfg = TrainConfig()
        assert [cfg.supervision_lambda(t, 0.3) for t in (1, 50, 51, 1000)] == [
            pytest.approx(0.03), pytest.approx(0.03), 0.0, 0.0]

    @pytest.mark.parametrize("mode,expected", [("none", 0.0), ("all", 0.05)])
    def test_lambda_modes(self, mode, expected):
        assert TrainConfig(supervision=mode).supervision_lambda(500, 0.5) == pytest.approx(expected)

    def test_step_size(self):
        cfg = TrainConfig()
        assert cfg.step_size(900) == 8e-4
        assert cfg.step_size(901) == pytest.approx(8e-5)

    @pytest.mark.parametrize("kw", [dict(total_iters=-1), dict(total_iters=10),
                                    dict(loss_dropout_rate=1.0), dict(supervision="sometimes"),
                                    dict(supervision_iters=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_short_run_without_early_prior(self):
        assert TrainConfig(total_iters=10, supervision="none").total_iters == 10


class TestLosses:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.I = rng.random((3, 2, 4, 4))
        self.mask = rng.random((4, 4)) < 0.7
        self.mask[0, 0] = True

    def test_identical_is_zero(self):
        assert reconstruction_loss(dc.Tensor(self.I), self.I, self.mask).item() == 0.0

    def test_zero_prediction_is_mean_intensity(self):
        loss = reconstruction_loss(dc.Tensor(np.zeros_like(self.I)), self.I, self.mask).item()
        assert loss == pytest.approx(self.I[:, :, self.mask].mean(), rel=1e-12)

    def test_matches_loop(self):
        rng = np.random.default_rng(1)
        I_hat = rng.random(self.I.shape)
        keep = (rng.random(self.I.shape) < 0.1).astype(float)
        acc = 0.0
        for idx in np.ndindex(self.I.shape):
            if self.mask[idx[2], idx[3]]:
                acc += keep[idx] * abs(I_hat[idx] - self.I[idx])
        expected = 10.0 * acc / (3 * 2 * self.mask.sum())
        got = reconstruction_loss(dc.Tensor(I_hat), self.I, self.mask, keep, 10.0).item()
        assert got == pytest.approx(expected, rel=1e-12)

    def test_dropout_is_unbiased(self):
        rng = np.random.default_rng(2)
        I_hat = dc.Tensor(rng.random(self.I.shape))
        full = reconstruction_loss(I_hat, self.I, self.mask).item()
        draws = [reconstruction_loss(I_hat, self.I, self.mask,
                                     (rng.random(self.I.shape) < 0.1).astype(float), 10.0).item()
                 for _ in range(10_000)]
        assert abs(np.mean(draws) - full) <= 0.02 * full

    def test_empty_mask(self):
        with pytest.raises(ValueError):
            reconstruction_loss(dc.Tensor(self.I), self.I, np.zeros((4, 4), bool))

    def test_prior_identical(self):
        N = np.random.default_rng(3).standard_normal((1, 3, 4, 4))
        assert prior_loss(dc.Tensor(N), N[0], self.mask).item() == 0.0

    def test_prior_antipodal(self):
        N = np.random.default_rng(4).standard_normal((1, 3, 4, 4))
        N /= np.linalg.norm(N, axis=1, keepdims=True)
        assert prior_loss(dc.Tensor(N), -N[0], self.mask).item() == pytest.approx(4.0, rel=1e-12)

    def test_prior_matches_loop(self):
        rng = np.random.default_rng(5)
        N = rng.standard_normal((1, 3, 4, 4))
        N /= np.linalg.norm(N, axis=1, keepdims=True)
        P = rng.standard_normal((3, 4, 4))
        P /= np.linalg.norm(P, axis=0)
        acc = sum(sum((N[0, k, i, j] - P[k, i, j]) ** 2 for k in range(3))
                  for i in range(4) for j in range(4) if self.mask[i, j])
        got = prior_loss(dc.Tensor(N), P, self.mask).item()
        assert got == pytest.approx(acc / self.mask.sum(), rel=1e-12)


class TestTrace:
    def test_text_round_trip(self):
        trace = TrainTrace()
        trace.append(TraceRecord(1, 0.5, 0.4, 0.2, 0.5, 8e-4, 10, 100, 3.25))
        trace.append(TraceRecord(2, 0.3, 0.3, 0.1, 0.0, 8e-4, 9, 100, None))
        text = trace.to_text()
        assert text.splitlines()[0] == "# iteration L_rec L_prior lambda angular_error"
        back = TrainTrace.from_text(text)
        assert back.column("t") == [1, 2]
        assert back.column("loss_rec") == [0.4, 0.3]
        assert back.column("angular_error") == [3.25, None]
        assert back.records[0].loss == pytest.approx(0.5)

    def test_without_truth_has_four_columns(self):
        trace = TrainTrace()
        trace.append(TraceRecord(1, 0.5, 0.4, 0.2, 0.5, 8e-4, 10, 100))
        assert trace.to_text().splitlines()[1].count(" ") == 3

    def test_monotone(self):
        trace = TrainTrace()
        trace.append(TraceRecord(2, 0, 0, 0, 0, 0, 0, 0))
        with pytest.raises(ValueError):
            trace.append(TraceRecord(2, 0, 0, 0, 0, 0, 0, 0))


class TestTraining:
    def test_trace_length_and_finite(self, glossy):
        res = train_scene(glossy.stack, glossy.lights, glossy.mask, tiny_config(15), glossy.truth)
        assert len(res.trace) == 15
        assert np.all(np.isfinite(res.trace.column("loss")))
        assert all(e is not None for e in res.trace.column("angular_error"))

    def test_outputs_embedded_at_full_resolution(self, glossy):
        res = train_scene(glossy.stack, glossy.lights, glossy.mask, tiny_config(3))
        assert res.normals.normals.shape == (3, 12, 12)
        assert res.reflectance.shape == res.reconstruction.shape == (6, 1, 12, 12)
        assert res.normals.check_unit(glossy.mask, 1e-5)
        assert all(e is None for e in res.trace.column("angular_error"))

    def test_zero_iterations_is_init_forward(self, glossy):
        cfg = tiny_config(0, supervision_iters=0)
        res = train_scene(glossy.stack, glossy.lights, glossy.mask, cfg)
        prep = prepare(glossy.stack, glossy.lights, glossy.mask)
        init_seq, _ = np.random.SeedSequence(cfg.seed).spawn(2)
        nets = init_networks(6, 1, cfg, np.random.default_rng(init_seq))
        x = build_input(prep.images, prep.mask, np.float32)
        N = psnet_normals(psnet_features(x, nets.psnet), nets.psnet).data[0]
        assert len(res.trace) == 0
        np.testing.assert_array_equal(res.normals.normals, prep.crop.embed(N))

    def test_deterministic(self, glossy):
        a = train_scene(glossy.stack, glossy.lights, glossy.mask, tiny_config(8), glossy.truth)
        b = train_scene(glossy.stack, glossy.lights, glossy.mask, tiny_config(8), glossy.truth)
        np.testing.assert_array_equal(a.normals.normals, b.normals.normals)
        assert a.trace.to_text() == b.trace.to_text()

    def test_seed_changes_result(self, glossy):
        a = train_scene(glossy.stack, glossy.lights, glossy.mask, tiny_config(2))
        b = train_scene(glossy.stack, glossy.lights, glossy.mask, tiny_config(2, seed=1))
        assert not np.array_equal(a.normals.normals, b.normals.normals)

    @pytest.mark.parametrize("k", [4.0, 0.125])
    def test_power_of_two_scale_gives_identical_run(self, glossy, k):
        a = train_scene(glossy.stack, glossy.lights, glossy.mask, tiny_config(5))
        b = train_scene(ImageStack(k * glossy.stack.images), glossy.lights, glossy.mask, tiny_config(5))
        np.testing.assert_array_equal(a.normals.normals, b.normals.normals)
        assert a.trace.to_text() == b.trace.to_text()

    def test_general_scale_is_invariant_up_to_rounding(self, glossy):
        a = prepare(glossy.stack, glossy.lights, glossy.mask)
        b = prepare(ImageStack(3.7 * glossy.stack.images), glossy.lights, glossy.mask)
        np.testing.assert_allclose(b.images, a.images, rtol=1e-14)
        assert b.c == pytest.approx(a.c, rel=1e-14)

    def test_c_is_loss_of_zero_prediction(self, glossy):
        prep = prepare(glossy.stack, glossy.lights, glossy.mask)
        zero = reconstruction_loss(dc.Tensor(np.zeros_like(prep.images)), prep.images, prep.mask).item()
        assert prep.c == pytest.approx(zero, rel=1e-12)

    def test_prior_ignored_once_lambda_is_zero(self, glossy):
        prep = prepare(glossy.stack, glossy.lights, glossy.mask)
        other = replace(prep, prior=-prep.prior)
        for cfg in (tiny_config(4, supervision="none"), tiny_config(4, supervision_iters=0)):
            _, ta = train_prepared(prep, cfg)
            _, tb = train_prepared(other, cfg)
            assert ta.column("loss") == tb.column("loss")
        cfg = tiny_config(4, supervision_iters=2)
        _, ta = train_prepared(prep, cfg)
        _, tb = train_prepared(other, cfg)
        assert ta.column("loss")[0] != tb.column("loss")[0]

    def test_schedule_reaches_optimizer(self, glossy, monkeypatch):
        rates = []
        step = dc.Adam.step

        def spy(self, grads=None):
            rates.append(self.lr)
            return step(self, grads)

        monkeypatch.setattr(dc.Adam, "step", spy)
        cfg = tiny_config(12, supervision_iters=3, lr_drop_at=9)
        _, trace = train_prepared(prepare(glossy.stack, glossy.lights, glossy.mask), cfg)
        assert rates == [8e-4] * 9 + [pytest.approx(8e-5)] * 3
        lam = trace.column("lam")
        assert all(v > 0 for v in lam[:3]) and all(v == 0.0 for v in lam[3:])

    def test_dropout_rate(self, glossy):
        _, trace = train_prepared(prepare(glossy.stack, glossy.lights, glossy.mask), tiny_config(30))
        kept, total = sum(trace.column("kept")), sum(trace.column("elements"))
        assert stats.binomtest(kept, total, 0.1).pvalue > 1e-3

    def test_divergence_raises_with_trace(self, glossy):
        prep = prepare(glossy.stack, glossy.lights, glossy.mask)
        bad = replace(prep, images=np.full_like(prep.images, np.inf))
        with np.errstate(invalid="ignore"), pytest.raises(TrainingDiverged) as err:
            train_prepared(bad, tiny_config(5))
        assert err.value.t == 1 and len(err.value.trace) == 1


class TestMedianProtocol:
    def test_single_run_matches_train_scene(self, glossy):
        cfg = tiny_config(3)
        summary = run_median_protocol(glossy, cfg, runs=1, keep_results=True)
        direct = train_scene(glossy.stack, glossy.lights, glossy.mask, cfg, glossy.truth)
        np.testing.assert_array_equal(summary.runs[0].result.normals.normals, direct.normals.normals)
        assert summary.median == summary.runs[0].score

    def test_even_run_count_rejected(self, glossy):
        with pytest.raises(ValueError):
            run_median_protocol(glossy, tiny_config(1), runs=2)

    def test_diverged_run_excluded(self, glossy):
        def trainer(stack, lights, mask, cfg, truth):
            if cfg.seed == 1:
                raise TrainingDiverged(7, None)
            return train_scene(stack, lights, mask, cfg, truth)

        summary = run_median_protocol(glossy, tiny_config(3), runs=3, trainer=trainer)
        assert summary.diverged == [1]
        assert len(summary.scores) == 2
        assert summary.median == pytest.approx(np.median(summary.scores))
        assert "status=diverged" in summary.to_text()

    def test_deterministic(self, glossy):
        a = run_median_protocol(glossy, tiny_config(3), runs=3)
        b = run_median_protocol(glossy, tiny_config(3), runs=3)
        assert a.to_text() == b.to_text()

    def test_without_truth_scores_final_loss(self, glossy):
        scene = Scene(glossy.stack, glossy.lights, glossy.mask)
        summary = run_median_protocol(scene, tiny_config(2), runs=1)
        assert summary.median == summary.runs[0].final_loss


@pytest.mark.slow
def test_lambertian_sphere_beats_least_squares():
    from psnir.baseline_ls import solve_least_squares
    from psnir.evaluator import mean_angular_error

    scene = make_sphere_scene(0.9, 32, random_lights(10, 1, 45.0), Material(1.0))
    ls = mean_angular_error(solve_least_squares(scene.stack, scene.lights, scene.mask).normals,
                            scene.truth, scene.mask)
    cfg = TrainConfig(total_iters=200, lr_drop_at=180)
    res = train_scene(scene.stack, scene.lights, scene.mask, cfg, scene.truth)
    assert mean_angular_error(res.normals, scene.truth, scene.mask) < ls
    assert res.trace.records[-1].loss < res.trace.records[49].loss
