"""Optimizer hand evaluations, schedule shape, checkpointing, loop behavior."""

import math

import numpy as np
import pytest

import pmaa.functional as F
from pmaa import checkpoint as ckpt_io
from pmaa import data, train
from pmaa.model import ModelConfig, Parameter, PmaaModel
from pmaa.tensor import Tensor, backward


def scalar_param(value, name="p", decay=True):
    return Parameter(np.full((1, 1, 1, 1), value), name, decay=decay)


class TestL1Loss:
    def test_identical_inputs_give_zero(self):
        x = Tensor(np.random.default_rng(0).uniform(-1, 1, (1, 4, 8, 8)))
        assert train.l1_loss(x, Tensor(x.data.copy())).item() == 0.0

    def test_hand_case(self):
        pred = Tensor(np.asarray([[[[1.0, -1.0]]]]))
        target = Tensor.zeros((1, 1, 1, 2))
        assert train.l1_loss(pred, target).item() == pytest.approx(1.0)

    def test_sign_symmetry(self):
        rng = np.random.default_rng(1)
        pred = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)))
        target = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)))
        a = train.l1_loss(pred, target).item()
        b = train.l1_loss(Tensor(-pred.data), Tensor(-target.data)).item()
        assert a == pytest.approx(b)

    def test_gradient_is_scaled_sign(self):
        pred = Tensor(np.asarray([[[[1.0, -2.0, 0.0, 3.0]]]]), requires_grad=True)
        target = Tensor.zeros((1, 1, 1, 4))
        backward(train.l1_loss(pred, target))
        assert np.allclose(pred.grad, np.asarray([[[[1, -1, 0, 1]]]]) / 4.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            train.l1_loss(Tensor.zeros((1, 1, 2, 2)), Tensor.zeros((1, 1, 2, 3)))


class TestAdamW:
    def test_first_step_without_decay(self):
        p = scalar_param(1.0)
        p.grad = np.ones((1, 1, 1, 1))
        opt = train.AdamW([p], weight_decay=0.0)
        opt.step(lr=0.1)
        # m_hat = v_hat = 1 -> p = 1 - 0.1 / (1 + 1e-8)
        assert p.data.reshape(()) == pytest.approx(0.9, abs=1e-8)

    def test_first_step_with_decoupled_decay(self):
        p = scalar_param(1.0)
        p.grad = np.ones((1, 1, 1, 1))
        opt = train.AdamW([p], weight_decay=0.01)
        opt.step(lr=0.1)
        # extra decay term: lr * wd * p = 0.001
        assert p.data.reshape(()) == pytest.approx(0.899, abs=1e-8)

    def test_zero_gradient_no_decay_leaves_parameter(self):
        p = scalar_param(0.7)
        opt = train.AdamW([p], weight_decay=0.0)
        for _ in range(5):
            opt.step(lr=0.1)
        assert p.data.reshape(()) == pytest.approx(0.7)

    def test_decay_flag_respected(self):
        p = scalar_param(1.0, name="norm.gamma", decay=False)
        opt = train.AdamW([p], weight_decay=0.5)
        opt.step(lr=0.1)
        assert p.data.reshape(()) == pytest.approx(1.0)

    def test_quadratic_descends_in_one_step(self):
        p = scalar_param(1.0)
        loss = F.sum_all(F.mul(p, p))
        backward(loss)
        opt = train.AdamW([p])
        opt.step(lr=5e-4)
        assert float(p.data.reshape(())) ** 2 < 1.0

    def test_second_moment_nonnegative(self):
        p = scalar_param(1.0)
        opt = train.AdamW([p])
        for seed in range(3):
            p.grad = np.random.default_rng(seed).normal(size=(1, 1, 1, 1))
            opt.step(lr=1e-3)
        assert np.all(opt.v[p.name] >= 0)


class TestCosineSchedule:
    def test_endpoints_and_midpoint(self):
        assert train.cosine_lr(0, 100) == pytest.approx(5e-4)
        assert train.cosine_lr(100, 100) == pytest.approx(0.0)
        assert train.cosine_lr(50, 100) == pytest.approx(2.5e-4)

    def test_monotone_nonincreasing(self):
        values = [train.cosine_lr(s, 200) for s in range(201)]
        assert all(b <= a + 1e-18 for a, b in zip(values, values[1:]))

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="step"):
            train.cosine_lr(11, 10)
        with pytest.raises(ValueError, match="total_steps"):
            train.cosine_lr(0, 0)


def tiny_dataset(tmp_path, count=2, size=16, seed=9):
    manifest = data.synth_generate(tmp_path / "d", count=count, size=size,
                                   coverage=0.3, seed=seed)
    return data.load_dataset(manifest, 255.0)


def tiny_model(seed=0, **kw):
    args = dict(hidden_channels=8, downsamples=2, stages=1, height=16, width=16)
    args.update(kw)
    return PmaaModel(ModelConfig(**args), seed=seed)


class TestCheckpoint:
    def test_round_trip_bit_identical_forward(self, tmp_path):
        model = tiny_model(seed=3)
        samples = tiny_dataset(tmp_path)
        xs = samples[0].cloudy
        before, _ = model(*xs)

        path = tmp_path / "model.ckpt"
        records = {name: p.data for name, p in model.params.named_parameters()}
        ckpt_io.save_checkpoint(path, model.config, records, epoch=4, best_ssim=0.5)

        loaded = ckpt_io.load_checkpoint(path)
        assert loaded.epoch == 4 and loaded.best_ssim == 0.5
        fresh = PmaaModel(loaded.config, seed=999)  # seed must not matter after restore
        ckpt_io.restore_params(fresh.params, loaded)
        after, _ = fresh(*xs)
        assert np.array_equal(before.data, after.data)

    def test_moment_records_round_trip(self, tmp_path):
        model = tiny_model(seed=4)
        opt = train.AdamW(model.params.parameters())
        for p in model.params.parameters():
            p.grad = np.full(p.shape, 0.1)
        opt.step(lr=1e-3)
        records = {name: p.data for name, p in model.params.named_parameters()}
        records.update(opt.moment_records())
        path = tmp_path / "m.ckpt"
        ckpt_io.save_checkpoint(path, model.config, records, epoch=0,
                                best_ssim=0.1, step=opt.step_count)
        loaded = ckpt_io.load_checkpoint(path)
        opt2 = train.AdamW(model.params.parameters())
        opt2.restore_moments(loaded.moment_records(), loaded.step)
        assert opt2.step_count == 1
        name = model.params.parameters()[0].name
        assert np.array_equal(opt2.m[name], opt.m[name])

    def test_shape_mismatch_names_tensor(self, tmp_path):
        model = tiny_model(seed=5)
        records = {name: p.data for name, p in model.params.named_parameters()}
        path = tmp_path / "bad.ckpt"
        ckpt_io.save_checkpoint(path, model.config, records, epoch=0, best_ssim=0.0)
        loaded = ckpt_io.load_checkpoint(path)
        other = tiny_model(seed=5, hidden_channels=16)
        with pytest.raises(ValueError, match="bottleneck|stage0"):
            ckpt_io.restore_params(other.params, loaded)

    def test_corrupted_file_names_offset(self, tmp_path):
        path = tmp_path / "corrupt.ckpt"
        path.write_bytes(b"PMAACKPT" + b"\x01\x00\x00\x00" + b"\xff\xff\xff\xff")
        with pytest.raises(ckpt_io.CheckpointError):
            ckpt_io.load_checkpoint(path)

    def test_bad_magic_at_offset_zero(self, tmp_path):
        path = tmp_path / "nomagic.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(ckpt_io.CheckpointError) as err:
            ckpt_io.load_checkpoint(path)
        assert err.value.offset == 0


class TestTrainLoop:
    def test_zero_epochs_rejected(self, tmp_path):
        model = tiny_model()
        samples = tiny_dataset(tmp_path)
        with pytest.raises(ValueError, match="epochs"):
            train.train_loop(model, samples, samples, train.TrainConfig(epochs=0))

    def test_fixed_seed_reproduces_epoch_logs(self, tmp_path):
        samples = tiny_dataset(tmp_path)

        def run():
            model = tiny_model(seed=6)
            cfg = train.TrainConfig(epochs=2, batch_size=2, seed=11)
            return [log.to_line() for log in
                    train.train_loop(model, samples, samples, cfg).logs]

        assert run() == run()

    def test_best_ssim_checkpointing(self, tmp_path):
        model = tiny_model(seed=7)
        samples = tiny_dataset(tmp_path)
        path = tmp_path / "best.ckpt"
        cfg = train.TrainConfig(epochs=2, batch_size=2, seed=12,
                                checkpoint_path=str(path))
        result = train.train_loop(model, samples, samples, cfg)
        assert path.exists()
        assert len(result.logs) == 2
        loaded = ckpt_io.load_checkpoint(path)
        assert loaded.epoch == result.best_epoch
        assert loaded.best_ssim == pytest.approx(result.best_ssim)

    def test_non_finite_loss_aborts_with_location(self, tmp_path):
        model = tiny_model(seed=8)
        first = model.params.parameters()[0]
        first.data = np.full(first.shape, np.nan)
        samples = tiny_dataset(tmp_path)
        with pytest.raises(train.TrainDiverged, match="epoch 0, batch 0"):
            train.train_loop(model, samples, samples,
                             train.TrainConfig(epochs=1, batch_size=2))

    def test_loss_decreases_on_tiny_overfit(self, tmp_path):
        # 50 steps on the overfit task, published hyperparameters
        manifest = data.synth_generate(tmp_path / "o", count=4, size=64,
                                       coverage=0.3, seed=7)
        samples = data.load_dataset(manifest, 255.0)
        model = PmaaModel(ModelConfig(hidden_channels=16, downsamples=3, stages=2,
                                      height=64, width=64), seed=0)
        cfg = train.TrainConfig(epochs=50, batch_size=4, seed=0)
        result = train.train_loop(model, samples, samples, cfg)
        losses = [log.train_l1 for log in result.logs]
        first = np.mean(losses[:10])
        last = np.mean(losses[-10:])
        assert last < first
