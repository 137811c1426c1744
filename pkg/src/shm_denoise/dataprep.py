"""Min-max scaling, chronological splits and sliding-window supervision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .signalgen import TimeSeries

FORECAST = "forecast"
DENOISE = "denoise"
TASKS = (FORECAST, DENOISE)


class DataError(ValueError):
    """Invalid windowing, split or normalization request."""


@dataclass
class NormState:
    minimum: np.ndarray
    maximum: np.ndarray
    fitted_on: tuple[int, int]

    @property
    def degenerate(self) -> np.ndarray:
        return self.maximum == self.minimum

    @property
    def channels(self) -> int:
        return len(self.minimum)

    def to_dict(self) -> dict:
        return {
            "min": [float(v) for v in self.minimum],
            "max": [float(v) for v in self.maximum],
            "fitted_on": list(self.fitted_on),
        }

    @classmethod
    def from_dict(cls, d: dict) -> NormState:
        return cls(np.asarray(d["min"], dtype=np.float64), np.asarray(d["max"], dtype=np.float64),
                   tuple(d["fitted_on"]))

    def select(self, channels: Sequence[int]) -> NormState:
        idx = list(channels)
        return NormState(self.minimum[idx], self.maximum[idx], self.fitted_on)

    def scale(self, x: np.ndarray, channel_axis: int = 0) -> np.ndarray:
        """Forward map on a raw array whose ``channel_axis`` indexes channels."""
        lo, span, degen = self._broadcastable(x.ndim, channel_axis)
        return np.where(degen, 0.0, (x - lo) / span)

    def unscale(self, y: np.ndarray, channel_axis: int = 0) -> np.ndarray:
        lo, span, degen = self._broadcastable(y.ndim, channel_axis)
        return np.where(degen, lo, y * span + lo)

    def _broadcastable(self, ndim: int, axis: int):
        shape = [1] * ndim
        shape[axis] = self.channels
        degen = self.degenerate
        span = np.where(degen, 1.0, self.maximum - self.minimum)
        return self.minimum.reshape(shape), span.reshape(shape), degen.reshape(shape)


def fit_normalizer(series: TimeSeries, interval: tuple[int, int] | None = None) -> NormState:
    start, stop = interval if interval is not None else (0, series.length)
    if not 0 <= start < stop <= series.length:
        raise DataError(f"normalizer interval [{start}, {stop}) is empty or outside [0, {series.length})")
    seg = series.values[:, start:stop]
    return NormState(seg.min(axis=1), seg.max(axis=1), (start, stop))


def _check_channels(series: TimeSeries, norm: NormState) -> None:
    if series.channels != norm.channels:
        raise DataError(f"series has {series.channels} channels, normalizer has {norm.channels}")


def normalize(series: TimeSeries, norm: NormState) -> TimeSeries:
    _check_channels(series, norm)
    return series.with_values(norm.scale(series.values))


def denormalize(series: TimeSeries, norm: NormState) -> TimeSeries:
    _check_channels(series, norm)
    return series.with_values(norm.unscale(series.values))


@dataclass
class WindowSet:
    """Supervised pairs: ``inputs`` N x W x C, ``targets`` N x H x C_t."""

    inputs: np.ndarray
    targets: np.ndarray
    starts: np.ndarray
    task: str
    stride: int
    target_channels: list[int]
    norm: NormState | None = None

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def window(self) -> int:
        return self.inputs.shape[1]

    @property
    def horizon(self) -> int:
        return self.targets.shape[1]

    def subset(self, idx) -> WindowSet:
        return WindowSet(self.inputs[idx], self.targets[idx], self.starts[idx], self.task,
                         self.stride, self.target_channels, self.norm)


def window_count(T: int, W: int, H: int, stride: int, task: str) -> int:
    span = W + H if task == FORECAST else W
    if span > T:
        return 0
    return (T - span) // stride + 1


def make_windows(series: TimeSeries, W: int, H: int = 1, stride: int = 1, task: str = FORECAST,
                 clean: TimeSeries | None = None, target_channels: Sequence[int] | None = None,
                 norm: NormState | None = None) -> WindowSet:
    """Cut ``series`` into overlapping windows.

    Forecast targets are the ``H`` noisy samples right after each window;
    denoise targets are the clean samples at the window's last ``H`` positions.
    Window ``i`` starts at ``i * stride``.
    """
    if task not in TASKS:
        raise DataError(f"task must be one of {TASKS}, got {task!r}")
    if W < 1 or H < 1:
        raise DataError(f"window W={W} and horizon H={H} must be positive")
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    C, T = series.values.shape
    channels = list(range(C)) if target_channels is None else list(target_channels)
    if not channels or any(not 0 <= c < C for c in channels):
        raise DataError(f"target channels {channels} out of range for {C} channels")
    if task == DENOISE:
        if clean is None:
            raise DataError("denoise task needs a clean reference series")
        if clean.values.shape != series.values.shape:
            raise DataError(f"clean shape {clean.values.shape} != noisy shape {series.values.shape}")
        if H > W:
            raise DataError(f"denoise horizon H={H} exceeds window W={W}")
    N = window_count(T, W, H, stride, task)
    if N < 1:
        need = W + H if task == FORECAST else W
        raise DataError(f"series of length {T} too short for window span {need}")

    starts = np.arange(N) * stride
    x = series.values.T  # T x C
    idx = starts[:, None] + np.arange(W)[None, :]
    inputs = x[idx]
    if task == FORECAST:
        tidx = starts[:, None] + W + np.arange(H)[None, :]
        targets = x[tidx][:, :, channels]
    else:
        tidx = starts[:, None] + W - H + np.arange(H)[None, :]
        targets = clean.values.T[tidx][:, :, channels]
    return WindowSet(inputs, targets, starts, task, stride, channels, norm)


def split_chronological(T: int, fractions: Sequence[float] = (0.7, 0.15, 0.15),
                        min_length: int = 1) -> list[tuple[int, int]]:
    """Contiguous train/val/test index intervals covering ``[0, T)``."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise DataError(f"need three positive split fractions, got {list(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions sum to {sum(fractions)}, expected 1")
    a = int(round(T * fractions[0]))
    b = int(round(T * (fractions[0] + fractions[1])))
    bounds = [(0, a), (a, b), (b, T)]
    for name, (lo, hi) in zip(("train", "validation", "test"), bounds):
        if hi - lo < min_length:
            raise DataError(f"{name} split [{lo}, {hi}) shorter than required {min_length} samples")
    return bounds


def slice_series(series: TimeSeries, interval: tuple[int, int]) -> TimeSeries:
    lo, hi = interval
    return series.with_values(series.values[:, lo:hi])
