"""Trainer: learning-rate schedule exactness, Adam and EMA behaviour, crop
alignment, and short deterministic end-to-end runs."""

import csv
import math
from pathlib import Path

import numpy as np
import pytest

from udcnet import data_io
from udcnet.degrade import DegradationConfig, HdrPair, Psf, scene_synthesize, simulate
from udcnet.errors import DataError, NumericError
from udcnet.model import ModelConfig, ModelParams, init_params
from udcnet.tensor import Tensor
from udcnet.trainer import (TrainConfig, TrainState, adam_step, ema_update,
                            evaluate, lr_schedule, sample_crop, scaled_restarts,
                            train)

MICRO = ModelConfig(channels=4, blocks=(1, 1, 1, 1, 1, 1, 1))


def delta_psf():
    k = np.zeros((3, 3))
    k[1, 1] = 1.0
    return Psf(k)


def make_dataset(root, n=2, hw=16, noise=0.0, lights=1, seed=0):
    psf = delta_psf()
    cfg = DegradationConfig(noise_sigma=noise)
    pairs = []
    for i in range(n):
        scene = scene_synthesize(hw, hw, lights, 500.0, seed ^ i)
        pairs.append(simulate(scene, psf, cfg, (seed ^ i) + 1))
    data_io.save_dataset(root, pairs, psf, {"degrade.noise_sigma": noise,
                                            "degrade.saturation_level": 500.0})
    return pairs, psf


class TestLrSchedule:
    CFG = TrainConfig(total_iters=6000, restart_iters=(500, 1500, 3000, 4500), seed=0)

    def test_start_and_restarts_hit_lr_max(self):
        assert lr_schedule(0, self.CFG) == pytest.approx(2e-4, abs=1e-12)
        for boundary in self.CFG.restart_iters:
            assert lr_schedule(boundary, self.CFG) == pytest.approx(2e-4, abs=1e-12)

    def test_segment_midpoint(self):
        # cosine at pi/2: (lr_min + lr_max) / 2  (= 1.0005e-4 for the defaults)
        mid = (500 + 1500) // 2
        expected = (self.CFG.lr_min + self.CFG.lr_max) / 2
        assert lr_schedule(mid, self.CFG) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(1.0005e-4, abs=1e-12)

    def test_never_leaves_bounds(self):
        vals = [lr_schedule(i, self.CFG) for i in range(0, 6000, 7)]
        assert min(vals) >= self.CFG.lr_min
        assert max(vals) <= self.CFG.lr_max

    def test_continuous_within_segments(self):
        cfg = self.CFG
        for it in range(1, 500):
            a, b = lr_schedule(it - 1, cfg), lr_schedule(it, cfg)
            assert abs(a - b) < 4e-3 * cfg.lr_max

    def test_monotone_decay_within_segment(self):
        vals = [lr_schedule(i, self.CFG) for i in range(500, 1500)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_schedule(-1, self.CFG)
        with pytest.raises(ValueError):
            lr_schedule(6000, self.CFG)

    def test_proportional_desk_defaults(self):
        cfg = TrainConfig(total_iters=5000)
        assert cfg.restart_iters == (417, 1250, 2500, 3750)
        assert scaled_restarts(600_000) == (50_000, 150_000, 300_000, 450_000)

    def test_invalid_configs(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_max=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(restart_iters=(100, 50), total_iters=200)
        with pytest.raises(ValueError):
            TrainConfig(patch=20)


def scalar_params(value):
    return ModelParams({"w": Tensor(np.array([value]), requires_grad=True)})


class TestAdam:
    def test_first_step_magnitude(self):
        params = scalar_params(0.0)
        state = TrainState.initial(params, seed=0)
        lr = 1e-3
        adam_step(params, {"w": np.array([1.0])}, state, lr)
        delta = float(params["w"].data[0])
        assert abs(delta + lr) <= 1e-6 * lr

    def test_zero_gradients_leave_params_unchanged(self):
        params = scalar_params(1.5)
        state = TrainState.initial(params, seed=0)
        adam_step(params, {"w": np.array([0.0])}, state, 1e-2)
        adam_step(params, {}, state, 1e-2)  # missing grad counts as zero
        assert float(params["w"].data[0]) == 1.5

    def test_quadratic_convergence(self):
        params = scalar_params(1.0)
        state = TrainState.initial(params, seed=0)
        for _ in range(100):
            w = float(params["w"].data[0])
            adam_step(params, {"w": np.array([2.0 * w])}, state, 0.1)
        assert abs(float(params["w"].data[0])) < 0.05

    def test_nonfinite_gradient_aborts_with_path(self):
        params = scalar_params(1.0)
        state = TrainState.initial(params, seed=0)
        with pytest.raises(NumericError, match="'w'"):
            adam_step(params, {"w": np.array([np.nan])}, state, 1e-3)


class TestEma:
    def test_decay_zero_copies_params(self):
        params = scalar_params(3.0)
        shadow = {"w": np.array([0.0])}
        ema_update(shadow, params, 0.0)
        assert shadow["w"][0] == 3.0

    def test_decay_one_freezes_shadow(self):
        params = scalar_params(3.0)
        shadow = {"w": np.array([1.25])}
        ema_update(shadow, params, 1.0)
        assert shadow["w"][0] == 1.25

    def test_closed_form(self):
        params = scalar_params(2.0)
        shadow = {"w": np.array([0.0])}
        n = 57
        for _ in range(n):
            ema_update(shadow, params, 0.999)
        expected = 2.0 * (1.0 - 0.999 ** n)
        assert shadow["w"][0] == pytest.approx(expected, rel=1e-12)

    def test_convex_envelope(self, rng):
        params = scalar_params(0.0)
        shadow = {"w": np.array([0.5])}
        lo = hi = 0.5
        for _ in range(50):
            v = float(rng.uniform(-2, 2))
            params["w"].data[0] = v
            lo, hi = min(lo, v), max(hi, v)
            ema_update(shadow, params, 0.9)
            assert lo - 1e-12 <= shadow["w"][0] <= hi + 1e-12

    def test_shape_mismatch(self):
        params = scalar_params(1.0)
        with pytest.raises(ValueError):
            ema_update({"w": np.zeros(2)}, params, 0.9)


class TestCropAlignment:
    def test_marker_pixel_stays_aligned(self, rng):
        H = W = 32
        clean = np.zeros((1, 3, H, W))
        degraded = np.zeros((1, 3, H, W))
        iy, ix = 13, 21
        clean[0, :, iy, ix] = 7.0
        degraded[0, :, iy, ix] = 7.0
        pair = HdrPair(clean=Tensor(clean), degraded=Tensor(degraded))
        hits = 0
        for _ in range(200):
            c, d = sample_crop(pair, 16, rng)
            pos_c = np.argwhere(c[0, 0] == 7.0)
            pos_d = np.argwhere(d[0, 0] == 7.0)
            assert np.array_equal(pos_c, pos_d)
            hits += len(pos_c)
        assert hits > 0  # the marker landed in some crops

    def test_patch_too_large(self, rng):
        pair = HdrPair(clean=Tensor(np.zeros((1, 3, 8, 8))),
                       degraded=Tensor(np.zeros((1, 3, 8, 8))))
        with pytest.raises(DataError):
            sample_crop(pair, 16, rng)


class TestTrainLoop:
    def test_short_run_writes_outputs_and_is_deterministic(self, tmp_path):
        make_dataset(tmp_path / "data", n=2, hw=16)
        tcfg = TrainConfig(total_iters=8, batch_size=1, patch=16, seed=5,
                           restart_iters=(), log_interval=2, ema_decay=0.9)
        s1 = train(MICRO, tcfg, tmp_path / "data", tmp_path / "run1")
        s2 = train(MICRO, tcfg, tmp_path / "data", tmp_path / "run2")
        log1 = Path(s1["log_path"]).read_text()
        log2 = Path(s2["log_path"]).read_text()
        assert log1 == log2  # identical loss curves for identical seeds
        rows = list(csv.reader(log1.strip().splitlines()))
        assert rows[0] == ["iter", "lr", "loss"]
        assert (tmp_path / "run1" / "checkpoint" / "manifest.txt").exists()
        assert (tmp_path / "run1" / "checkpoint_ema" / "manifest.txt").exists()

    def test_empty_dataset_rejected(self, tmp_path):
        (tmp_path / "data" / "clean").mkdir(parents=True)
        (tmp_path / "data" / "degraded").mkdir(parents=True)
        with pytest.raises(DataError):
            train(MICRO, TrainConfig(total_iters=1, patch=16), tmp_path / "data", tmp_path / "run")

    def test_loss_decreases_on_overfit_sample(self, tmp_path):
        make_dataset(tmp_path / "data", n=1, hw=16, lights=1, seed=2)
        tcfg = TrainConfig(total_iters=120, batch_size=1, patch=16, seed=0,
                           restart_iters=(), log_interval=10, ema_decay=0.9)
        summary = train(MICRO, tcfg, tmp_path / "data", tmp_path / "run")
        log = Path(summary["log_path"]).read_text().strip().splitlines()[1:]
        losses = [float(r.split(",")[2]) for r in log]
        assert losses[-1] < losses[0]


class TestEvaluate:
    def test_ground_truth_as_prediction_hits_caps(self, tmp_path):
        # delta PSF + zero noise means degraded == clean; the identity-start
        # model therefore predicts the ground truth exactly
        make_dataset(tmp_path / "data", n=2, hw=16, noise=0.0, lights=0)
        tcfg = TrainConfig(total_iters=1, batch_size=1, patch=16, seed=0,
                           restart_iters=(), ema_decay=1.0)  # shadow = init = identity
        train(MICRO, tcfg, tmp_path / "data", tmp_path / "run")
        rows = evaluate(tmp_path / "run", tmp_path / "data", use_ema=True,
                        report_path=tmp_path / "report.csv")
        assert len(rows) == 3  # 2 images + mean
        for name, psnr, ssim in rows:
            assert psnr == 120.0
            assert ssim == pytest.approx(1.0, abs=1e-12)
        text = (tmp_path / "report.csv").read_text().strip().splitlines()
        assert text[0] == "name,psnr,ssim"
        assert len(text) == 4
        assert text[-1].startswith("mean,")

    def test_trained_beats_untrained(self, tmp_path):
        make_dataset(tmp_path / "data", n=1, hw=16, noise=2.0, lights=1, seed=4)
        base = TrainConfig(total_iters=1, batch_size=1, patch=16, seed=0,
                           restart_iters=(), ema_decay=0.0, lr_max=1e-12, lr_min=1e-13)
        train(MICRO, base, tmp_path / "data", tmp_path / "untrained")
        tuned = TrainConfig(total_iters=150, batch_size=1, patch=16, seed=0,
                            restart_iters=(), ema_decay=0.0)
        train(MICRO, tuned, tmp_path / "data", tmp_path / "trained")
        before = evaluate(tmp_path / "untrained", tmp_path / "data", use_ema=True)[-1][1]
        after = evaluate(tmp_path / "trained", tmp_path / "data", use_ema=True)[-1][1]
        assert after > before

    def test_missing_checkpoint(self, tmp_path):
        make_dataset(tmp_path / "data", n=1, hw=16)
        with pytest.raises(DataError):
            evaluate(tmp_path / "nowhere", tmp_path / "data")
