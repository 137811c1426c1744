"""Synthetic multi-sensor vibration records and CSV ingestion.

Clean records are superpositions of damped sinusoidal modes; each mode is
seen by every sensor channel through a per-channel shape coefficient.
Noise comes in three classes:

* instrumental -- i.i.d. Gaussian per channel,
* environmental -- a narrowband tone plus a random-walk drift,
* operational -- Poisson-arriving bursts with exponential decay.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class SignalError(ValueError):
    """Invalid signal/noise specification or malformed input data."""


@dataclass
class Mode:
    frequency_hz: float
    damping_ratio: float = 0.0
    amplitude: float = 1.0
    phase_rad: float = 0.0
    shape: list[float] = field(default_factory=lambda: [1.0])


@dataclass
class ModalSignalSpec:
    modes: list[Mode]
    sample_rate_hz: float
    duration_s: float
    channels: int = 1
    seed: int = 0

    @property
    def length(self) -> int:
        return int(round(self.sample_rate_hz * self.duration_s))

    def validate(self) -> None:
        if self.sample_rate_hz <= 0:
            raise SignalError("sample_rate_hz must be positive")
        if self.duration_s <= 0:
            raise SignalError("duration_s must be positive")
        if self.channels < 1:
            raise SignalError("channels must be >= 1")
        if self.length < 2:
            raise SignalError(f"record length {self.length} < 2 samples")
        nyquist = self.sample_rate_hz / 2
        for i, m in enumerate(self.modes):
            where = f"modes[{i}]"
            if not 0 < m.frequency_hz < nyquist:
                raise SignalError(
                    f"{where}.frequency_hz={m.frequency_hz} must lie in (0, {nyquist}) (Nyquist)"
                )
            if not 0 <= m.damping_ratio < 1:
                raise SignalError(f"{where}.damping_ratio must be in [0, 1)")
            if m.amplitude < 0:
                raise SignalError(f"{where}.amplitude must be >= 0")
            if not 0 <= m.phase_rad < 2 * math.pi:
                raise SignalError(f"{where}.phase_rad must be in [0, 2*pi)")
            if len(m.shape) != self.channels:
                raise SignalError(
                    f"{where}.shape has {len(m.shape)} entries, expected {self.channels}"
                )


@dataclass
class EnvTone:
    frequency_hz: float
    amplitude: float
    phase_rad: float = 0.0


@dataclass
class NoiseSpec:
    instrumental_sigma: float = 0.0
    env_interference: EnvTone | None = None
    env_drift_scale: float = 0.0
    op_burst_rate_hz: float = 0.0
    op_burst_amplitude: float = 0.0
    op_burst_decay_s: float = 0.05
    target_snr_db: float | None = None

    def validate(self) -> None:
        for name in ("instrumental_sigma", "env_drift_scale", "op_burst_rate_hz", "op_burst_amplitude"):
            if getattr(self, name) < 0:
                raise SignalError(f"{name} must be >= 0")
        if self.op_burst_decay_s <= 0:
            raise SignalError("op_burst_decay_s must be > 0")
        tone = self.env_interference
        if tone is not None and (tone.amplitude < 0 or tone.frequency_hz <= 0):
            raise SignalError("env_interference needs frequency_hz > 0 and amplitude >= 0")
        if self.target_snr_db is not None and not math.isfinite(self.target_snr_db):
            raise SignalError("target_snr_db must be finite")


@dataclass
class TimeSeries:
    """C x T sampled record."""

    values: np.ndarray
    sample_rate_hz: float
    channel_names: list[str]

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        C, T = self.values.shape
        if T < 2:
            raise SignalError(f"time series needs at least 2 samples, got {T}")
        if self.sample_rate_hz <= 0:
            raise SignalError("sample_rate_hz must be positive")
        if len(self.channel_names) != C:
            raise SignalError(f"{len(self.channel_names)} channel names for {C} channels")
        if len(set(self.channel_names)) != C:
            raise SignalError("channel names must be unique")
        if not np.isfinite(self.values).all():
            raise SignalError("time series contains NaN or Inf")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.length) / self.sample_rate_hz

    def with_values(self, values: np.ndarray) -> TimeSeries:
        return TimeSeries(values, self.sample_rate_hz, list(self.channel_names))


def default_channel_names(n: int) -> list[str]:
    return [f"s{i + 1}" for i in range(n)]


def synthesize_clean(spec: ModalSignalSpec) -> TimeSeries:
    spec.validate()
    T = spec.length
    t = np.arange(T) / spec.sample_rate_hz
    values = np.zeros((spec.channels, T))
    for m in spec.modes:
        w = 2 * math.pi * m.frequency_hz
        wd = w * math.sqrt(1.0 - m.damping_ratio**2)
        wave = m.amplitude * np.exp(-w * m.damping_ratio * t) * np.sin(wd * t + m.phase_rad)
        values += np.outer(np.asarray(m.shape, dtype=np.float64), wave)
    return TimeSeries(values, spec.sample_rate_hz, default_channel_names(spec.channels))


def signal_power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def snr_db(clean: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * math.log10(signal_power(clean) / signal_power(noise))


def noise_components(shape: tuple[int, int], sample_rate_hz: float, noise: NoiseSpec,
                     seed: int) -> dict[str, np.ndarray]:
    """Raw (unscaled) noise of each class, keyed ``instrumental``/``environmental``/``operational``."""
    C, T = shape
    rng = np.random.default_rng(seed)
    t = np.arange(T) / sample_rate_hz

    instrumental = rng.normal(0.0, 1.0, size=(C, T)) * noise.instrumental_sigma

    env = np.zeros((C, T))
    tone = noise.env_interference
    if tone is not None and tone.amplitude > 0:
        env += tone.amplitude * np.sin(2 * math.pi * tone.frequency_hz * t + tone.phase_rad)
    if noise.env_drift_scale > 0:
        env += np.cumsum(rng.normal(0.0, noise.env_drift_scale, size=(C, T)), axis=1)

    op = np.zeros((C, T))
    if noise.op_burst_rate_hz > 0 and noise.op_burst_amplitude > 0:
        duration = T / sample_rate_hz
        decay_samples = noise.op_burst_decay_s * sample_rate_hz
        for c in range(C):
            n_bursts = rng.poisson(noise.op_burst_rate_hz * duration)
            starts = np.sort(rng.integers(0, T, size=n_bursts))
            signs = rng.choice([-1.0, 1.0], size=n_bursts)
            for s, sign in zip(starts, signs):
                k = np.arange(T - s)
                op[c, s:] += sign * noise.op_burst_amplitude * np.exp(-k / decay_samples)
    return {"instrumental": instrumental, "environmental": env, "operational": op}


def add_noise(clean: TimeSeries, noise: NoiseSpec, seed: int) -> TimeSeries:
    noise.validate()
    parts = noise_components(clean.values.shape, clean.sample_rate_hz, noise, seed)
    total = parts["instrumental"] + parts["environmental"] + parts["operational"]
    if noise.target_snr_db is not None:
        p_clean = signal_power(clean.values)
        if p_clean == 0:
            raise SignalError("target_snr_db needs a clean signal with non-zero power")
        p_noise = signal_power(total)
        if p_noise == 0:
            raise SignalError("target_snr_db set but every noise class is disabled")
        wanted = p_clean / 10.0 ** (noise.target_snr_db / 10.0)
        total = total * math.sqrt(wanted / p_noise)
    return clean.with_values(clean.values + total)


# ----------------------------------------------------------------------- CSV
def save_csv(series: TimeSeries, path: str | Path) -> None:
    path = Path(path)
    t = series.times
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *series.channel_names])
        for n in range(series.length):
            w.writerow([f"{t[n]:.17g}"] + [f"{v:.17g}" for v in series.values[:, n]])


def load_csv(path: str | Path) -> TimeSeries:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SignalError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "t" or len(header) < 2:
        raise SignalError(f"{path}: header must be 't,<name1>,...'")
    body = [r for r in rows[1:] if r]
    if len(body) < 2:
        raise SignalError(f"{path}: need at least 2 data rows, got {len(body)}")
    data = np.empty((len(body), len(header)))
    for i, row in enumerate(body):
        line = i + 2
        if len(row) != len(header):
            raise SignalError(f"{path}: row {line} has {len(row)} cells, header has {len(header)}")
        for j, cell in enumerate(row):
            try:
                data[i, j] = float(cell)
            except ValueError:
                raise SignalError(
                    f"{path}: non-numeric cell {cell!r} at row {line}, column {j + 1} ({header[j]})"
                ) from None
    if not np.isfinite(data).all():
        raise SignalError(f"{path}: non-finite values")
    dt = np.diff(data[:, 0])
    if np.any(dt <= 0):
        bad = int(np.argmax(dt <= 0)) + 3
        raise SignalError(f"{path}: time column not strictly increasing at row {bad}")
    step = dt.mean()
    if np.max(np.abs(dt - step)) > 1e-6 * step:
        raise SignalError(f"{path}: time column is not uniformly spaced")
    return TimeSeries(data[:, 1:].T.copy(), 1.0 / step, header[1:])

