import math

import numpy as np
import pytest

from tcjepa import autodiff as ad
from tcjepa.baseline import ijepa_step
from tcjepa.data import DataConfig, SyntheticDataset
from tcjepa.losses import LossConfig
from tcjepa.nn import Parameter
from tcjepa.probe import pooled_features
from tcjepa.train import (METRIC_FIELDS, VERSION, CheckpointError, NonFiniteLossError, TrainConfig, Trainer,
                          TrainState, adamw_update, decode_checkpoint, encode_checkpoint, load_checkpoint,
                          save_checkpoint, schedules, train_step)

from conftest import tiny_config


def _batch(cfg, idx=(0, 1, 2, 3)):
    data = SyntheticDataset(cfg.data)
    images, captions, _ = data.batch(np.array(idx), np.dtype(cfg.dtype).type)
    return images, captions


class TestSchedules:
    def cfg(self):
        return TrainConfig(base_lr=1e-3, wd_start=0.04, wd_end=0.4, ema_start=0.996, ema_end=1.0)

    def test_start(self):
        lr, wd, m = schedules(0, 100, self.cfg(), warmup_steps=10)
        assert lr == 0.0 and wd == 0.04 and m == 0.996

    def test_end(self):
        lr, wd, m = schedules(100, 100, self.cfg(), warmup_steps=10)
        assert lr == pytest.approx(0.0, abs=1e-15) and wd == pytest.approx(0.4) and m == 1.0

    def test_warmup_boundary(self):
        lr, _, _ = schedules(10, 100, self.cfg(), warmup_steps=10)
        assert lr == 1e-3

    def test_continuous_at_boundary(self):
        cfg = self.cfg()
        left = schedules(9.999, 100, cfg, warmup_steps=10)[0]
        right = schedules(10.001, 100, cfg, warmup_steps=10)[0]
        assert abs(left - right) < 1e-6

    def test_cosine_midpoint(self):
        lr, _, _ = schedules(55, 100, self.cfg(), warmup_steps=10)
        assert lr == pytest.approx(0.5e-3)

    def test_warmup_from_epochs(self):
        cfg = TrainConfig(epochs=10, warmup_epochs=2, batch_size=64)
        assert cfg.warmup_steps == 2 * cfg.steps_per_epoch

    def test_invalid(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=2, warmup_epochs=3)


@pytest.mark.usefixtures("f64")
class TestAdamW:
    def _one(self, value, grad, lr, wd, step=1):
        p = Parameter(np.array([value], dtype=np.float64))
        moments = {"p": (np.zeros(1), np.zeros(1))}
        adamw_update({"p": p}, {"p": np.array([grad])}, moments, step, lr, wd)
        return p.data[0]

    def test_zero_grad_no_decay(self):
        assert self._one(1.5, 0.0, 0.1, 0.0) == 1.5

    def test_pure_shrink(self):
        assert self._one(2.0, 0.0, 0.1, 0.5) == pytest.approx(2.0 * (1 - 0.1 * 0.5), rel=1e-15)

    def test_first_step_moves_by_lr(self):
        # bias-corrected first step is lr * g / |g| for any g
        assert self._one(1.0, 3.0, 0.01, 0.0) == pytest.approx(0.99, rel=1e-6)

    def test_quadratic_descent(self):
        p = Parameter(np.array([1.0]))
        moments = {"p": (np.zeros(1), np.zeros(1))}
        cfg = TrainConfig(base_lr=0.005)   # small enough that 100 steps never overshoot 0
        trace = []
        for step in range(100):
            lr, _, _ = schedules(step, 100, cfg, warmup_steps=10)
            adamw_update({"p": p}, {"p": 2 * p.data}, moments, step + 1, lr, 0.0)
            trace.append(abs(p.data[0]))
        assert all(b <= a for a, b in zip(trace[10:], trace[11:]))
        assert trace[-1] < trace[10] < 1.0

    def test_missing_grad_treated_as_zero(self):
        p = Parameter(np.array([1.0]))
        adamw_update({"p": p}, {}, {"p": (np.zeros(1), np.zeros(1))}, 1, 0.1, 0.0)
        assert p.data[0] == 1.0


class TestTrainStep:
    def test_baseline_reduction(self, make_config):
        for seed in range(3):
            cfg = make_config("none", seed=seed)
            cfg.loss = LossConfig(lam=0.0, beta=0.0)
            a, b = TrainState(cfg), TrainState(cfg)
            images, _ = _batch(cfg)
            for _ in range(2):
                _, la, _ = train_step(a, (images, None))
                lb = ijepa_step(b, images)
                assert la.l_predict == float(lb)
            for k, v in a.tensors().items():
                assert np.array_equal(v, b.tensors()[k]), k

    def test_zero_lr_keeps_parameters(self, make_config):
        cfg = make_config("fine", base_lr=0.0)
        state = TrainState(cfg)
        before = {k: p.data.copy() for k, p in state.trainable().items()}
        _, out, _ = train_step(state, _batch(cfg))
        assert math.isfinite(float(out.total.data))
        for k, p in state.trainable().items():
            assert np.array_equal(p.data, before[k]), k

    def test_target_only_moves_by_ema(self, make_config):
        cfg = make_config("fine")
        state = TrainState(cfg)
        _, _, (_, _, m) = train_step(state, _batch(cfg))
        # after one step the target is m * init + (1 - m) * updated online
        state2 = TrainState(cfg)
        online = dict(state.pair.online.named_parameters())
        for k, p in state2.pair.target.named_parameters():
            ref = p.dtype.type(m) * p.data + p.dtype.type(1 - m) * online[k].data
            np.testing.assert_array_equal(dict(state.pair.target.named_parameters())[k].data, ref)

    def test_breakdown_total(self, make_config):
        cfg = make_config("fine")
        _, out, _ = train_step(TrainState(cfg), _batch(cfg))
        ref = out.l_predict + cfg.loss.lam * out.l_sparse + cfg.loss.beta * out.l_consistency
        assert abs(float(out.total.data) - ref) < 1e-6

    def test_nan_aborts_with_diagnostics(self, make_config):
        cfg = make_config("fine")
        state = TrainState(cfg)
        images, captions = _batch(cfg)
        images[0, 0, 0, 0] = np.nan
        with pytest.raises(NonFiniteLossError) as err:
            train_step(state, (images, captions))
        assert err.value.diagnostics["step"] == 0
        assert "l_predict" in err.value.diagnostics
        assert state.step == 0



@pytest.fixture(scope="module")
def smoke_run():
    cfg = tiny_config("fine", max_steps=200, epochs=200 * 4 // 32 + 1, warmup_epochs=1)
    trainer = Trainer(cfg)
    return trainer, trainer.run()


class TestSmokeRun:
    def test_prediction_loss_drops(self, smoke_run):
        _, rows = smoke_run
        assert len(rows) == 200
        lp = [r["l_predict"] for r in rows]
        assert np.mean(lp[-20:]) < lp[0]

    def test_pooled_target_features_do_not_collapse(self, smoke_run):
        trainer, _ = smoke_run
        images = SyntheticDataset(DataConfig(size=256, seed=999)).images.astype(np.float32)
        feats = pooled_features(trainer.state.pair.target, images, trainer.cfg.encoder.patch_size)
        assert feats.var(axis=0).mean() > 1e-4


class TestCheckpoint:
    def _trained(self, make_config, steps=2, **over):
        cfg = make_config("fine", max_steps=50, **over)
        tr = Trainer(cfg)
        tr.run(steps=steps)
        return tr

    def test_round_trip_is_bit_exact(self, make_config, tmp_path):
        tr = self._trained(make_config)
        path = save_checkpoint(tr.state, tmp_path / "a.tcjp")
        state = load_checkpoint(path)
        a, b = tr.state.tensors(), state.tensors()
        assert a.keys() == b.keys()
        for k in a:
            assert a[k].dtype == b[k].dtype and np.array_equal(a[k], b[k]), k
        assert state.step == tr.state.step
        assert state.rng.bit_generator.state == tr.state.rng.bit_generator.state

    def test_save_load_save_byte_identical(self, make_config, tmp_path):
        tr = self._trained(make_config)
        p1 = save_checkpoint(tr.state, tmp_path / "a.tcjp")
        p2 = save_checkpoint(load_checkpoint(p1), tmp_path / "b.tcjp")
        assert p1.read_bytes() == p2.read_bytes()

    def test_header_layout(self, make_config, tmp_path):
        blob = save_checkpoint(self._trained(make_config, steps=0).state, tmp_path / "a.tcjp").read_bytes()
        assert blob[:4] == b"TCJP"
        assert int.from_bytes(blob[4:8], "little") == VERSION

    def test_truncated(self, make_config, tmp_path):
        path = save_checkpoint(self._trained(make_config, steps=0).state, tmp_path / "a.tcjp")
        blob = path.read_bytes()
        for cut in (3, 15, len(blob) // 2, len(blob) - 1):
            path.write_bytes(blob[:cut])
            with pytest.raises(CheckpointError):
                load_checkpoint(path)

    def test_flipped_byte(self, make_config, tmp_path):
        path = save_checkpoint(self._trained(make_config, steps=0).state, tmp_path / "a.tcjp")
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="CRC"):
            load_checkpoint(path)

    def test_bad_magic_and_version(self):
        blob = encode_checkpoint({"x": np.zeros(2, np.float32)}, {"step": 0})
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(b"XXXX" + blob[4:])
        import struct
        import zlib
        body = blob[:4] + struct.pack("<I", VERSION + 1) + blob[8:-4]
        with pytest.raises(CheckpointError, match="version"):
            decode_checkpoint(body + struct.pack("<I", zlib.crc32(body)))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.tcjp")

    def test_foreign_tensor_set(self, tmp_path):
        path = tmp_path / "x.tcjp"
        cfg = TrainConfig()
        path.write_bytes(encode_checkpoint({"x": np.zeros(2, np.float32)},
                                           {"step": 0, "config": cfg.to_dict(), "rng": None}))
        with pytest.raises(CheckpointError, match="mismatch"):
            load_checkpoint(path)

    def test_resume_reproduces_next_loss(self, make_config, tmp_path):
        cfg = make_config("fine", max_steps=8)
        full = Trainer(cfg).run()
        first = Trainer(make_config("fine", max_steps=8))
        first.run(steps=5)
        path = save_checkpoint(first.state, tmp_path / "k.tcjp")
        resumed = Trainer(make_config("fine", max_steps=8), state=load_checkpoint(path))
        rest = resumed.run()
        assert [r["l_predict"] for r in rest] == [r["l_predict"] for r in full[5:]]
        assert [r["total"] for r in rest] == [r["total"] for r in full[5:]]


class TestMetrics:
    def test_csv_columns_and_rows(self, make_config, tmp_path):
        cfg = make_config("fine", max_steps=3)
        Trainer(cfg).run(metrics_path=tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == ",".join(METRIC_FIELDS)
        assert len(lines) == 4
        assert [int(line.split(",")[0]) for line in lines[1:]] == [0, 1, 2]

    def test_csv_is_deterministic(self, make_config, tmp_path):
        for name in ("a", "b"):
            Trainer(make_config("fine", max_steps=3)).run(metrics_path=tmp_path / f"{name}.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_append_only(self, make_config, tmp_path):
        cfg = make_config("fine", max_steps=4)
        tr = Trainer(cfg)
        tr.run(steps=2, metrics_path=tmp_path / "m.csv")
        tr.run(steps=2, metrics_path=tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines.count(lines[0]) == 1 and len(lines) == 5

    def test_periodic_checkpoints(self, make_config, tmp_path):
        cfg = make_config("none", checkpoint_every=1, max_steps=16)
        Trainer(cfg).run(checkpoint_dir=tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert "final.tcjp" in names and len(names) == 1 + 16 // cfg.steps_per_epoch


class TestConfig:
    def test_dict_round_trip(self, make_config):
        cfg = make_config("adaln", "avg", seed=3)
        back = TrainConfig.from_dict(cfg.to_dict())
        assert back.digest() == cfg.digest()
        assert back.predictor.conditioner == "adaln"

    def test_digest_changes(self, make_config):
        assert make_config(seed=1).digest() != make_config(seed=2).digest()

    def test_dtype_float64(self, make_config):
        cfg = make_config("fine", dtype="float64")
        state = TrainState(cfg)
        assert all(p.dtype == np.float64 for p in state.trainable().values())
        with ad.default_dtype(np.float64):
            _, out, _ = train_step(state, _batch(cfg))
        assert out.total.dtype == np.float64
