import math

import numpy as np
import pytest

from shm_denoise.signalgen import (EnvTone, Mode, ModalSignalSpec, NoiseSpec, SignalError, TimeSeries,
                                   add_noise, load_csv, save_csv, snr_db, synthesize_clean)


def direct_dft_magnitude(x):
    """O(N^2) DFT over the non-negative frequency bins."""
    n = len(x)
    k = np.arange(n // 2 + 1)
    mags = np.empty(len(k))
    t = np.arange(n)
    for i in k:
        mags[i] = abs(np.sum(x * np.exp(-2j * math.pi * i * t / n)))
    return mags


def one_mode(**kw):
    return Mode(**{"frequency_hz": 10.0, "damping_ratio": 0.0, "amplitude": 1.0, "phase_rad": 0.0,
                   "shape": [1.0], **kw})


class TestSynthesize:
    def test_phase_quarter_turn_starts_at_one(self):
        spec = ModalSignalSpec([one_mode(phase_rad=math.pi / 2)], 1000.0, 0.1)
        assert synthesize_clean(spec).values[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_no_modes_is_zero(self):
        ts = synthesize_clean(ModalSignalSpec([], 100.0, 1.0, channels=2))
        assert ts.values.shape == (2, 100)
        assert not ts.values.any()

    def test_dft_peak_at_mode_frequency(self):
        fs, n = 1000.0, 4096
        ts = synthesize_clean(ModalSignalSpec([one_mode(frequency_hz=25.0)], fs, n / fs))
        assert ts.length == n
        mags = direct_dft_magnitude(ts.values[0])
        assert np.argmax(mags) == round(25.0 * n / fs)

    def test_formula_pointwise(self):
        m = Mode(7.0, 0.05, 1.3, 0.4, [0.5, -2.0])
        ts = synthesize_clean(ModalSignalSpec([m], 200.0, 0.5, channels=2))
        for n in (0, 17, 99):
            t = n / 200.0
            w = 2 * math.pi * 7.0
            base = 1.3 * math.exp(-w * 0.05 * t) * math.sin(w * math.sqrt(1 - 0.05**2) * t + 0.4)
            assert ts.values[0, n] == pytest.approx(0.5 * base, abs=1e-14)
            assert ts.values[1, n] == pytest.approx(-2.0 * base, abs=1e-14)

    def test_superposition(self):
        m1 = [Mode(5.0, 0.02, 1.0, 0.3, [1.0, 0.2]), Mode(11.0, 0.0, 0.5, 1.0, [0.4, -1.0])]
        m2 = [Mode(31.0, 0.1, 2.0, 2.0, [-0.7, 0.9])]
        def synth(modes):
            return synthesize_clean(ModalSignalSpec(modes, 128.0, 2.0, channels=2)).values
        np.testing.assert_allclose(synth(m1 + m2), synth(m1) + synth(m2), rtol=0, atol=1e-15)

    def test_damping_envelope(self):
        f, zeta, fs = 4.0, 0.05, 512.0
        ts = synthesize_clean(ModalSignalSpec([one_mode(frequency_hz=f, damping_ratio=zeta)], fs, 4.0))
        x = np.abs(ts.values[0])
        env = np.exp(-2 * math.pi * f * zeta * ts.times)
        assert np.all(x <= env + 1e-12)
        period = int(fs / f)
        blocks = [x[i : i + period].max() for i in range(period, len(x) - period, period)]
        # one sample of envelope decay is the allowed slack
        slack = 1 - math.exp(-2 * math.pi * f * zeta / fs)
        assert all(b2 <= b1 + slack for b1, b2 in zip(blocks, blocks[1:]))

    @pytest.mark.parametrize("freq", [50.0, 60.0])
    def test_rejects_nyquist(self, freq):
        with pytest.raises(SignalError, match=r"modes\[0\]\.frequency_hz"):
            synthesize_clean(ModalSignalSpec([one_mode(frequency_hz=freq)], 100.0, 1.0))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(SignalError, match="shape"):
            synthesize_clean(ModalSignalSpec([one_mode(shape=[1.0, 2.0])], 100.0, 1.0, channels=3))


class TestNoise:
    @pytest.fixture
    def clean(self):
        spec = ModalSignalSpec([Mode(3.0, 0.0, math.sqrt(2.0), 0.0, [1.0])], 100.0, 1000.0)
        return synthesize_clean(spec)

    def test_zero_noise_is_identity(self, clean):
        out = add_noise(clean, NoiseSpec(), seed=3)
        np.testing.assert_array_equal(out.values, clean.values)

    def test_instrumental_sigma(self):
        clean = TimeSeries(np.zeros((1, 100_000)), 100.0, ["a"])
        out = add_noise(clean, NoiseSpec(instrumental_sigma=1.0), seed=11)
        assert 0.99 <= np.std(out.values - clean.values) <= 1.01

    def test_target_snr_unit_power(self, clean):
        # amplitude sqrt(2) sine over whole periods has unit power
        assert np.mean(clean.values**2) == pytest.approx(1.0, rel=1e-9)
        noise = NoiseSpec(instrumental_sigma=0.3, env_interference=EnvTone(17.0, 0.2), env_drift_scale=0.01,
                          op_burst_rate_hz=0.2, op_burst_amplitude=1.0, target_snr_db=5.0)
        out = add_noise(clean, noise, seed=2)
        p_noise = np.mean((out.values - clean.values) ** 2)
        assert p_noise == pytest.approx(10 ** -0.5, rel=0.01)
        assert snr_db(clean.values, out.values - clean.values) == pytest.approx(5.0, abs=0.01)

    @pytest.mark.parametrize("target", [-3.0, 0.0, 10.0, 20.0])
    def test_snr_contract(self, target):
        spec = ModalSignalSpec([Mode(10.0, 0.01, 1.0, 0.0, [1.0, 0.5]), Mode(27.0, 0.01, 0.6, 1.0, [0.3, -1.0])],
                               256.0, 16.0, channels=2)
        clean = synthesize_clean(spec)
        noise = NoiseSpec(0.05, EnvTone(60.0, 0.1), 0.002, 0.5, 0.3, 0.05, target)
        out = add_noise(clean, noise, seed=0)
        assert abs(snr_db(clean.values, out.values - clean.values) - target) <= 0.01

    def test_rescaling_keeps_class_ratios(self, clean):
        base = NoiseSpec(instrumental_sigma=0.2, env_interference=EnvTone(13.0, 0.5))
        raw = add_noise(clean, base, seed=4).values - clean.values
        scaled = add_noise(clean, NoiseSpec(0.2, EnvTone(13.0, 0.5), target_snr_db=3.0), seed=4).values - clean.values
        ratio = scaled / raw
        np.testing.assert_allclose(ratio, ratio.flat[0], rtol=1e-9)

    def test_deterministic(self, clean):
        noise = NoiseSpec(0.1, EnvTone(5.0, 0.1), 0.01, 1.0, 0.5)
        a = add_noise(clean, noise, seed=9).values
        b = add_noise(clean, noise, seed=9).values
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, add_noise(clean, noise, seed=10).values)

    def test_snr_on_silent_signal_rejected(self):
        silent = TimeSeries(np.zeros((1, 50)), 10.0, ["a"])
        with pytest.raises(SignalError):
            add_noise(silent, NoiseSpec(instrumental_sigma=1.0, target_snr_db=0.0), seed=0)

    def test_negative_parameters_rejected(self, clean):
        with pytest.raises(SignalError):
            add_noise(clean, NoiseSpec(instrumental_sigma=-1.0), seed=0)

    def test_bursts_are_transient(self):
        clean = TimeSeries(np.zeros((1, 2000)), 100.0, ["a"])
        out = add_noise(clean, NoiseSpec(op_burst_rate_hz=0.2, op_burst_amplitude=2.0, op_burst_decay_s=0.05), 1)
        x = np.abs(out.values[0])
        assert x.max() > 1.0
        assert np.mean(x < 1e-3) > 0.5


class TestCsv:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        ts = TimeSeries(rng.normal(size=(3, 4096)) * 1e3, 256.0, ["x", "y", "z"])
        save_csv(ts, tmp_path / "a.csv")
        back = load_csv(tmp_path / "a.csv")
        assert back.channel_names == ["x", "y", "z"]
        assert np.max(np.abs(back.values - ts.values)) <= 1e-9
        assert back.sample_rate_hz == pytest.approx(256.0, rel=1e-9)

    def test_lf_line_endings(self, tmp_path):
        save_csv(TimeSeries(np.zeros((1, 3)), 2.0, ["a"]), tmp_path / "a.csv")
        raw = (tmp_path / "a.csv").read_bytes()
        assert b"\r" not in raw and raw.startswith(b"t,a\n")

    def test_counting(self, tmp_path):
        p = tmp_path / "b.csv"
        p.write_text("t,s1,s2\n" + "".join(f"{i * 0.1},{i},{-i}\n" for i in range(5)))
        ts = load_csv(p)
        assert (ts.channels, ts.length, ts.channel_names) == (2, 5, ["s1", "s2"])

    def test_non_numeric_cell(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("t,s1\n0,1\n0.1,oops\n0.2,3\n")
        with pytest.raises(SignalError, match=r"row 3, column 2"):
            load_csv(p)

    @pytest.mark.parametrize("body,match", [
        ("t,s1\n0,1\n0.1,2,3\n", "row 3"),
        ("t,s1\n0,1\n0.2,2\n0.1,3\n", "strictly increasing"),
        ("t,s1\n0,1\n", "at least 2"),
        ("t,s1\n0,1\n0.1,2\n0.3,3\n", "uniformly"),
    ])
    def test_malformed(self, tmp_path, body, match):
        p = tmp_path / "d.csv"
        p.write_text(body)
        with pytest.raises(SignalError, match=match):
            load_csv(p)


def test_timeseries_invariants():
    with pytest.raises(SignalError):
        TimeSeries(np.array([[1.0, np.nan]]), 1.0, ["a"])
    with pytest.raises(SignalError):
        TimeSeries(np.zeros((2, 4)), 1.0, ["a", "a"])
    with pytest.raises(SignalError):
        TimeSeries(np.zeros((1, 1)), 1.0, ["a"])
