import json
import math
import struct

import numpy as np
import pytest

from shm_denoise import tensor as tn
from shm_denoise.dataprep import FORECAST, WindowSet, fit_normalizer, make_windows, normalize
from shm_denoise.layers import ConvSpec, Network, NetworkConfig, RecurrentSpec
from shm_denoise.signalgen import TimeSeries
from shm_denoise.tensor import Tensor
from shm_denoise.train import (AdamState, BadMagicError, Checkpoint, DivergenceError, EarlyStopping, ManifestError,
                               TrainConfig, TrainingError, TruncatedCheckpointError, VersionMismatchError,
                               adam_step, checkpoint_bytes, evaluate_loss, fit, load_checkpoint, mse_loss,
                               parse_checkpoint, save_checkpoint)


def small_config(**kw):
    base = dict(window=16, input_channels=2, conv=[ConvSpec(4, 3)], recurrent=[RecurrentSpec("gru", 6)],
                attention=True, dense=[8])
    base.update(kw)
    return NetworkConfig(**base)


def sine_windows(T=240, seed=0, W=16):
    rng = np.random.default_rng(seed)
    t = np.arange(T) / 32.0
    values = np.stack([np.sin(2 * np.pi * 3 * t), np.cos(2 * np.pi * 5 * t)]) + 0.05 * rng.normal(size=(2, T))
    s = TimeSeries(values, 32.0, ["a", "b"])
    norm = fit_normalizer(s)
    ws = make_windows(normalize(s, norm), W, 1, 1, FORECAST, target_channels=[0], norm=norm)
    n = len(ws)
    return ws.subset(slice(0, int(n * 0.7))), ws.subset(slice(int(n * 0.7), n)), norm


def linear_windows(n, seed):
    x = np.random.default_rng(seed).uniform(-1, 1, n)
    return WindowSet(x.reshape(n, 1, 1), 2 * x.reshape(n, 1, 1), np.arange(n), FORECAST, 1, [0])


class TestMse:
    def test_identical_is_zero(self):
        assert mse_loss(Tensor([[1.0, 2.0]]), [[1.0, 2.0]]).item() == 0.0

    def test_hand_value(self):
        # errors 1, 2, 3, 4, 0 -> squares sum to 30 over 6 entries
        pred = Tensor([[1.0, 2.0, 3.0], [4.0, 0.0, 0.0]])
        assert mse_loss(pred, np.zeros((2, 3))).item() == pytest.approx(30 / 6, abs=1e-15)

    def test_matches_loop(self):
        rng = np.random.default_rng(0)
        p, t = rng.normal(size=(4, 3, 2)), rng.normal(size=(4, 3, 2))
        loop = sum((a - b) ** 2 for a, b in zip(p.ravel(), t.ravel())) / p.size
        assert mse_loss(Tensor(p), t).item() == pytest.approx(loop, rel=1e-13)

    def test_shape_mismatch(self):
        with pytest.raises(tn.ShapeError):
            mse_loss(Tensor(np.zeros((2, 1))), np.zeros((1, 2)))


class TestAdam:
    def test_first_step_hand_value(self):
        cfg = TrainConfig()
        p = {"w": Tensor([0.0])}
        adam_step(p, {"w": np.array([1.0])}, AdamState(), cfg)
        assert abs(p["w"].data[0] - (-cfg.learning_rate / (1 + cfg.epsilon))) <= 1e-12

    @pytest.mark.parametrize("c", [-3.7, -1e-3, 0.25, 1.0, 42.0])
    def test_first_step_magnitude(self, c):
        # bias correction gives m_hat = c, v_hat = c^2: |step| = eta |c| / (|c| + eps)
        cfg = TrainConfig()
        p = {"w": Tensor(np.zeros(5))}
        adam_step(p, {"w": np.full(5, c)}, AdamState(), cfg)
        step = p["w"].data
        eta = cfg.learning_rate
        assert np.all(np.sign(step) == -np.sign(c))
        np.testing.assert_allclose(np.abs(step), eta * abs(c) / (abs(c) + cfg.epsilon), rtol=1e-14)
        assert np.all(np.abs(step) <= eta)
        if abs(c) >= 1:
            assert np.all(np.abs(step) > eta * (1 - cfg.epsilon))

    def test_zero_gradient_leaves_params(self):
        p = {"w": Tensor([1.5, -2.0])}
        state = AdamState()
        for _ in range(3):
            adam_step(p, {"w": np.zeros(2)}, state, TrainConfig())
        np.testing.assert_array_equal(p["w"].data, [1.5, -2.0])
        assert state.t == 3

    def test_second_step_hand_value(self):
        cfg = TrainConfig()
        p = {"w": Tensor([0.0])}
        state = AdamState()
        adam_step(p, {"w": np.array([1.0])}, state, cfg)
        adam_step(p, {"w": np.array([-2.0])}, state, cfg)
        m = 0.9 * 0.1 + 0.1 * -2.0
        v = 0.999 * 0.001 + 0.001 * 4.0
        second = -cfg.learning_rate * (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999**2)) + cfg.epsilon)
        expected = -cfg.learning_rate / (1 + cfg.epsilon) + second
        assert p["w"].data[0] == pytest.approx(expected, abs=1e-15)

    def test_non_finite_gradient_named(self):
        with pytest.raises(DivergenceError, match="'bad'"):
            adam_step({"ok": Tensor([0.0]), "bad": Tensor([0.0])},
                      {"ok": np.array([1.0]), "bad": np.array([np.nan])}, AdamState(), TrainConfig())

    @pytest.mark.parametrize("seed", range(5))
    def test_small_step_decreases_batch_loss(self, seed):
        train, _, _ = sine_windows(seed=seed)
        net = Network(small_config(), seed=seed)
        batch = train.subset(slice(0, 32))
        loss = mse_loss(net(batch.inputs)[0], batch.targets)
        tn.backward(loss)
        grads = {k: p.grad for k, p in net.params.items()}
        adam_step(net.params, grads, AdamState(), TrainConfig(learning_rate=1e-4))
        after = mse_loss(net(batch.inputs)[0], batch.targets).item()
        assert after < loss.item()


class TestEarlyStopping:
    def test_stops_after_patience_non_improvements(self):
        es = EarlyStopping(patience=2)
        outcomes = [es.update(e, v) for e, v in enumerate([1.0, 0.9, 0.91, 0.92])]
        assert outcomes == [(True, False), (True, False), (False, False), (False, True)]
        assert es.best_epoch == 1

    def test_min_delta(self):
        es = EarlyStopping(patience=1, min_delta=0.1)
        es.update(0, 1.0)
        assert es.update(1, 0.95) == (False, True)

    def test_improvement_resets_wait(self):
        es = EarlyStopping(patience=2)
        for e, v in enumerate([1.0, 1.1, 0.5, 0.6]):
            _, stop = es.update(e, v)
            assert not stop
        assert es.best_epoch == 2


class TestFit:
    def test_injected_sequence_bound(self):
        train, val, norm = sine_windows()
        seq = [1.0, 0.9, 0.91, 0.92, 0.93, 0.94]
        _, rep = fit(train, val, TrainConfig(max_epochs=6, patience=2), small_config(), norm,
                     val_loss_fn=lambda epoch, net: seq[epoch])
        assert rep.stop_reason == "early"
        assert rep.best_epoch == 1
        assert rep.stopped_epoch - rep.best_epoch <= 2
        assert rep.val_loss == seq[: rep.stopped_epoch + 1]

    def test_single_epoch(self):
        train, val, norm = sine_windows()
        _, rep = fit(train, val, TrainConfig(max_epochs=1), small_config(), norm)
        assert len(rep.train_loss) == len(rep.val_loss) == 1
        assert rep.stop_reason == "max_epochs" and rep.stopped_epoch == 0

    def test_linear_target_is_learned(self):
        train, val = linear_windows(64, 0), linear_windows(16, 1)
        cfg = NetworkConfig(window=1, input_channels=1, conv=[], recurrent=[], attention=False, dense=[])
        ckpt, rep = fit(train, val, TrainConfig(learning_rate=0.05, batch_size=8, max_epochs=200, patience=200),
                        cfg)
        assert min(rep.train_loss) < 1e-4
        assert ckpt.params["out.weight"][0, 0] == pytest.approx(2.0, abs=1e-2)

    def test_restore_best_after_reload(self, tmp_path):
        train, val, norm = sine_windows()
        ckpt, rep = fit(train, val, TrainConfig(max_epochs=4, patience=1, learning_rate=1e-2), small_config(), norm)
        save_checkpoint(ckpt, tmp_path / "m.shmd")
        reloaded = evaluate_loss(load_checkpoint(tmp_path / "m.shmd").network(), val)
        assert reloaded == pytest.approx(rep.best_val_loss, abs=1e-5)

    def test_deterministic(self):
        train, val, norm = sine_windows()
        runs = [fit(train, val, TrainConfig(max_epochs=2, seed=3), small_config(), norm) for _ in range(2)]
        assert runs[0][1].train_loss == runs[1][1].train_loss
        assert runs[0][1].val_loss == runs[1][1].val_loss
        for k in runs[0][0].params:
            assert runs[0][0].params[k].tobytes() == runs[1][0].params[k].tobytes()

    def test_shape_mismatch(self):
        train, val, norm = sine_windows()
        with pytest.raises(tn.ShapeError):
            fit(train, val, TrainConfig(max_epochs=1), small_config(input_channels=3), norm)

    def test_empty_split(self):
        train, val, norm = sine_windows()
        with pytest.raises(TrainingError):
            fit(train, val.subset(slice(0, 0)), TrainConfig(max_epochs=1), small_config(), norm)

    def test_divergence_reports_partial(self):
        train, val, norm = sine_windows()
        with pytest.raises(DivergenceError) as info:
            fit(train, val, TrainConfig(max_epochs=3), small_config(), norm,
                val_loss_fn=lambda epoch, net: [0.5, math.nan][epoch])
        assert info.value.report.val_loss == [0.5]
        assert info.value.report.stop_reason == "diverged"

    def test_best_so_far_monotone(self):
        train, val, norm = sine_windows()
        _, rep = fit(train, val, TrainConfig(max_epochs=5, patience=5), small_config(), norm,
                     val_loss_fn=lambda e, net: [0.5, 0.7, 0.3, 0.4, 0.2][e])
        assert rep.to_dict()["best_so_far_val_loss"] == [0.5, 0.5, 0.3, 0.3, 0.2]


class TestCheckpoint:
    @pytest.fixture
    def ckpt(self):
        _, _, norm = sine_windows()
        return Checkpoint.from_network(Network(small_config(), seed=4), norm, FORECAST, [0])

    def test_round_trip_bit_identical(self, ckpt, tmp_path):
        save_checkpoint(ckpt, tmp_path / "a.shmd")
        back = load_checkpoint(tmp_path / "a.shmd")
        x = np.random.default_rng(0).uniform(size=(7, 16, 2))
        assert back.network().predict(x)[0].tobytes() == ckpt.network().predict(x)[0].tobytes()
        np.testing.assert_array_equal(back.norm.minimum, ckpt.norm.minimum)
        assert back.net_config == ckpt.net_config
        assert (back.task, back.target_channels) == (FORECAST, [0])

    def test_layout(self, ckpt):
        blob = checkpoint_bytes(ckpt)
        assert blob[:4] == b"SHMD"
        version, hlen = struct.unpack("<II", blob[4:12])
        header = json.loads(blob[12 : 12 + hlen])
        assert version == 1
        assert {"net_config", "norm_state", "manifest"} <= set(header)
        total = sum(a.size for a in ckpt.params.values()) * 4
        assert len(blob) == 12 + hlen + total

    def test_bad_magic(self, ckpt):
        with pytest.raises(BadMagicError):
            parse_checkpoint(b"XXXX" + checkpoint_bytes(ckpt)[4:])

    def test_version_mismatch(self, ckpt):
        blob = checkpoint_bytes(ckpt)
        with pytest.raises(VersionMismatchError):
            parse_checkpoint(blob[:4] + struct.pack("<I", 2) + blob[8:])

    def test_truncated_payload(self, ckpt):
        with pytest.raises(TruncatedCheckpointError):
            parse_checkpoint(checkpoint_bytes(ckpt)[:-4])

    def test_truncated_header(self, ckpt):
        with pytest.raises(TruncatedCheckpointError):
            parse_checkpoint(checkpoint_bytes(ckpt)[:20])

    def _rewrite(self, ckpt, edit):
        header = ckpt.header()
        edit(header)
        raw = json.dumps(header).encode()
        payload = b"".join(a.astype("<f4").tobytes() for a in ckpt.params.values())
        return b"SHMD" + struct.pack("<II", 1, len(raw)) + raw + payload

    def test_out_of_bounds_offset(self, ckpt):
        blob = self._rewrite(ckpt, lambda h: h["manifest"][0].update(offset=10**6))
        with pytest.raises(ManifestError, match="out of bounds"):
            parse_checkpoint(blob)

    def test_wrong_shape(self, ckpt):
        blob = self._rewrite(ckpt, lambda h: h["manifest"][0].update(shape=[1, 1, 1]))
        with pytest.raises(ManifestError):
            parse_checkpoint(blob)

    def test_missing_entry(self, ckpt):
        blob = self._rewrite(ckpt, lambda h: h["manifest"].pop())
        with pytest.raises(ManifestError, match="lacks"):
            parse_checkpoint(blob)

    def test_overlap(self, ckpt):
        blob = self._rewrite(ckpt, lambda h: h["manifest"][1].update(offset=0))
        with pytest.raises(ManifestError, match="overlap"):
            parse_checkpoint(blob)

    def test_atomic_save_leaves_no_temp(self, ckpt, tmp_path):
        save_checkpoint(ckpt, tmp_path / "b.shmd")
        save_checkpoint(ckpt, tmp_path / "b.shmd")
        assert [p.name for p in tmp_path.iterdir()] == ["b.shmd"]
