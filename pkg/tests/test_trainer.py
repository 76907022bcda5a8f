"""Optimizer correctness, schedule conformance, and training-loop behavior."""

import numpy as np
import pytest

from deblur import dataio, trainer
from deblur.augment import gaussian_blur
from deblur.losses import LossConfig
from deblur.model import TOY_CONFIG, ParamStore, load
from deblur.tensor import Tensor


class FlatParams(ParamStore):
    """Minimal store for optimizer unit tests."""

    def __init__(self, **arrays):
        super().__init__(config=None)
        for name, arr in arrays.items():
            self.register(name, Tensor(np.asarray(arr, dtype=np.float64),
                                       requires_grad=True, dtype=np.float64))


class TestAdamW:
    def test_zero_grad_no_decay_is_fixed_point(self):
        params = FlatParams(w=[1.0, -2.0, 3.0])
        params["w"].grad = np.zeros(3)
        state = trainer.OptimState(weight_decay=0.0)
        trainer.adamw_step(params, state, lr=1e-3)
        assert np.array_equal(params["w"].data, [1.0, -2.0, 3.0])

    def test_first_step_hand_value(self):
        params = FlatParams(w=[1.0])
        params["w"].grad = np.array([0.5])
        state = trainer.OptimState(weight_decay=0.0, eps=1e-8)
        trainer.adamw_step(params, state, lr=1e-3)
        expected = 1.0 - 1e-3 * (0.5 / (0.5 + 1e-8))
        assert abs(params["w"].data[0] - expected) < 1e-12
        assert abs(params["w"].data[0] - 0.999000) < 1e-6

    def test_pure_decay_path(self):
        params = FlatParams(w=[2.0])
        params["w"].grad = np.zeros(1)
        state = trainer.OptimState(weight_decay=0.1)
        trainer.adamw_step(params, state, lr=1e-3)
        assert abs(params["w"].data[0] - 2.0 * (1.0 - 1e-4)) < 1e-12

    def test_decay_is_decoupled_from_adam(self, rng):
        """wd=0 must equal a plain Adam update exactly."""
        g = rng.standard_normal(4)
        w0 = rng.standard_normal(4)

        params = FlatParams(w=w0.copy())
        params["w"].grad = g.copy()
        state = trainer.OptimState(weight_decay=0.0)
        trainer.adamw_step(params, state, lr=1e-2)

        b1, b2, eps = state.beta1, state.beta2, state.eps
        m = (1 - b1) * g / (1 - b1)
        v = (1 - b2) * g * g / (1 - b2)
        adam = w0 - 1e-2 * m / (np.sqrt(v) + eps)
        assert np.allclose(params["w"].data, adam, atol=1e-15)

    def test_missing_grad_rejected(self):
        params = FlatParams(w=[1.0])
        with pytest.raises(ValueError, match="no gradient"):
            trainer.adamw_step(params, trainer.OptimState())

    def test_nan_grad_aborts_with_name(self):
        params = FlatParams(bad_tensor=[1.0])
        params["bad_tensor"].grad = np.array([np.nan])
        with pytest.raises(trainer.NumericAbort, match="bad_tensor"):
            trainer.adamw_step(params, trainer.OptimState())

    def test_decreases_convex_quadratic(self):
        """loss = 0.5 * w^2: steps below the curvature bound make progress."""
        params = FlatParams(w=[3.0])
        state = trainer.OptimState(weight_decay=0.0)
        prev_loss = 0.5 * 3.0 ** 2
        for _ in range(20):
            w = params["w"].data[0]
            params["w"].grad = np.array([w])
            trainer.adamw_step(params, state, lr=0.05)
            loss = 0.5 * params["w"].data[0] ** 2
            assert loss < prev_loss
            prev_loss = loss


class TestCosineLr:
    sched = trainer.TrainSchedule(total_iters=300_000)

    def test_endpoints_exact(self):
        assert trainer.cosine_lr(0, self.sched) == 3e-4
        assert trainer.cosine_lr(300_000, self.sched) == 1e-6

    def test_midpoint(self):
        got = trainer.cosine_lr(150_000, self.sched)
        assert abs(got - (3e-4 + 1e-6) / 2) < 1e-18

    def test_monotone_nonincreasing(self):
        values = [trainer.cosine_lr(t, self.sched) for t in range(0, 300_001, 10_000)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            trainer.cosine_lr(-1, self.sched)
        with pytest.raises(ValueError):
            trainer.cosine_lr(300_001, self.sched)


class TestLadder:
    def test_paper_8gpu_boundaries(self):
        s = trainer.PAPER_8GPU_SCHEDULE
        assert trainer.ladder_lookup(0, s) == (128, 64)
        assert trainer.ladder_lookup(91_999, s) == (128, 64)
        assert trainer.ladder_lookup(92_000, s) == (160, 40)
        assert trainer.ladder_lookup(156_000, s) == (192, 32)
        assert trainer.ladder_lookup(204_000, s) == (256, 16)
        assert trainer.ladder_lookup(240_000, s) == (320, 8)
        assert trainer.ladder_lookup(276_000, s) == (384, 8)
        assert trainer.ladder_lookup(299_999, s) == (384, 8)

    def test_improved_ladder_ends_at_384_1(self):
        s = trainer.IMPROVED_SCHEDULE
        assert trainer.ladder_lookup(299_999, s) == (384, 1)

    def test_repro_ladder_ends_at_320_1(self):
        s = trainer.REPRO_1GPU_SCHEDULE
        assert trainer.ladder_lookup(299_999, s) == (320, 1)

    def test_piecewise_constant_and_covering(self):
        s = trainer.PAPER_8GPU_SCHEDULE
        prev = trainer.ladder_lookup(0, s)
        changes = 0
        for it in range(0, 300_000, 1000):
            cur = trainer.ladder_lookup(it, s)
            if cur != prev:
                changes += 1
                prev = cur
        assert changes == len(s.ladder) - 1

    def test_ladder_validation(self):
        with pytest.raises(ValueError, match="start"):
            trainer.TrainSchedule(ladder=((5, 128, 8),))
        with pytest.raises(ValueError, match="increase"):
            trainer.TrainSchedule(ladder=((0, 128, 8), (0, 160, 4)))
        with pytest.raises(ValueError, match="nondecreasing"):
            trainer.TrainSchedule(ladder=((0, 128, 8), (10, 96, 4)))


def synth_dataset(tmp_path, rng, n=4, size=32):
    (tmp_path / "blur").mkdir(parents=True, exist_ok=True)
    (tmp_path / "sharp").mkdir(parents=True, exist_ok=True)
    for i in range(n):
        base = rng.random((3, size // 4, size // 4)).astype(np.float32)
        sharp = np.repeat(np.repeat(base, 4, axis=1), 4, axis=2)
        sharp = gaussian_blur(sharp, 0.8, 5).astype(np.float32)
        blur = gaussian_blur(sharp, 2.0, 9).astype(np.float32)
        dataio.save_image(blur, tmp_path / "blur" / f"p{i}.ppm")
        dataio.save_image(sharp, tmp_path / "sharp" / f"p{i}.ppm")
    return dataio.scan_pairs(tmp_path)


class TestTrainLoop:
    def _schedule(self, iters):
        return trainer.TrainSchedule(total_iters=iters, lr_start=1e-3,
                                     lr_end=1e-6, ladder=((0, 32, 4),))

    def test_same_seed_bit_identical_losses(self, rng, tmp_path):
        ds = synth_dataset(tmp_path, rng)
        kwargs = dict(seed=77, options=trainer.TrainOptions(val_interval=50,
                                                            checkpoint_interval=50))
        r1 = trainer.train(TOY_CONFIG, LossConfig(0.1), self._schedule(12), ds, **kwargs)
        r2 = trainer.train(TOY_CONFIG, LossConfig(0.1), self._schedule(12), ds, **kwargs)
        assert r1.log.losses() == r2.log.losses()

    def test_lambda_changes_trace(self, rng, tmp_path):
        ds = synth_dataset(tmp_path, rng)
        opts = trainer.TrainOptions(val_interval=50, checkpoint_interval=50)
        r1 = trainer.train(TOY_CONFIG, LossConfig(0.1), self._schedule(4), ds,
                           seed=1, options=opts)
        r2 = trainer.train(TOY_CONFIG, LossConfig(0.0), self._schedule(4), ds,
                           seed=1, options=opts)
        assert r1.log.losses()[1:] != r2.log.losses()[1:]

    def test_artifacts_written(self, rng, tmp_path):
        ds = synth_dataset(tmp_path, rng)
        out = tmp_path / "run"
        opts = trainer.TrainOptions(val_interval=4, checkpoint_interval=4, out_dir=out)
        result = trainer.train(TOY_CONFIG, LossConfig(0.1), self._schedule(8), ds,
                               seed=0, options=opts)
        assert (out / "train_log.csv").exists()
        assert result.last_checkpoint and result.last_checkpoint.exists()
        assert result.best_checkpoint and result.best_checkpoint.exists()
        loaded = load(result.last_checkpoint)
        assert loaded.config == TOY_CONFIG
        header = (out / "train_log.csv").read_text().splitlines()[0]
        assert header == "iter,loss,lr,psnr,ssim,wall_time"

    def test_empty_dataset_rejected(self, tmp_path):
        ds = dataio.PairedDataset(root=tmp_path, pairs=[])
        with pytest.raises(dataio.DatasetError):
            trainer.train(TOY_CONFIG, LossConfig(0.1), self._schedule(2), ds)

    def test_log_iters_strictly_increasing(self, rng, tmp_path):
        ds = synth_dataset(tmp_path, rng)
        opts = trainer.TrainOptions(val_interval=50, checkpoint_interval=50)
        r = trainer.train(TOY_CONFIG, LossConfig(0.1), self._schedule(6), ds,
                          seed=0, options=opts)
        iters = [row["iter"] for row in r.log.rows]
        assert iters == sorted(set(iters))

    def test_grad_clip_changes_updates(self, rng, tmp_path):
        ds = synth_dataset(tmp_path, rng)
        base = trainer.TrainOptions(val_interval=50, checkpoint_interval=50)
        clipped = trainer.TrainOptions(val_interval=50, checkpoint_interval=50,
                                       grad_clip=1e-4)
        r1 = trainer.train(TOY_CONFIG, LossConfig(0.1), self._schedule(4), ds,
                           seed=2, options=base)
        r2 = trainer.train(TOY_CONFIG, LossConfig(0.1), self._schedule(4), ds,
                           seed=2, options=clipped)
        assert r1.log.losses()[0] == r2.log.losses()[0]  # same first batch
        assert r1.log.losses()[1:] != r2.log.losses()[1:]

    def test_abort_retains_last_checkpoint(self, rng, tmp_path, monkeypatch):
        from deblur.tensor import NonFiniteError

        ds = synth_dataset(tmp_path, rng)
        out = tmp_path / "aborted"
        real_total_loss = trainer.total_loss
        calls = {"n": 0}

        def poisoned(pred, target, cfg):
            calls["n"] += 1
            if calls["n"] > 5:
                raise NonFiniteError("injected blow-up")
            return real_total_loss(pred, target, cfg)

        monkeypatch.setattr(trainer, "total_loss", poisoned)
        opts = trainer.TrainOptions(val_interval=100, checkpoint_interval=2,
                                    out_dir=out)
        with pytest.raises(trainer.NumericAbort, match="iteration 5"):
            trainer.train(TOY_CONFIG, LossConfig(0.1), self._schedule(20), ds,
                          seed=0, options=opts)
        assert (out / "checkpoint_last.ckpt").exists()
        load(out / "checkpoint_last.ckpt")  # still a valid checkpoint
