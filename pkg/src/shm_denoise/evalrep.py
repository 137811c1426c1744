"""Test-split metrics, naive baselines and attention-weight export.

All metrics are computed in the original (denormalized) units of the
series the windows were cut from.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataprep import DENOISE, FORECAST, NormState, WindowSet
from .tensor import ShapeError
from .train import Checkpoint

MA_WIDTH = 5


class AttentionDisabledError(ValueError):
    pass


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise ValueError("metrics need at least one sample")
    return pred, target


def rmse(pred, target) -> float:
    p, t = _pair(pred, target)
    return math.sqrt(float(np.mean((p - t) ** 2)))


def mae(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.mean(np.abs(p - t)))


def moving_average(x: np.ndarray, width: int = MA_WIDTH, axis: int = -1) -> np.ndarray:
    """Centered moving average; near the edges the window is truncated to what exists."""
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, -1)
    n = x.shape[-1]
    half = width // 2
    csum = np.concatenate([np.zeros(x.shape[:-1] + (1,)), np.cumsum(x, axis=-1)], axis=-1)
    lo = np.clip(np.arange(n) - half, 0, n)
    hi = np.clip(np.arange(n) + half + 1, 0, n)
    out = (csum[..., hi] - csum[..., lo]) / (hi - lo)
    return np.moveaxis(out, -1, axis)


@dataclass
class MetricsReport:
    task: str
    rmse: float
    mae: float
    per_channel: dict[str, dict[str, float]]
    baselines: dict[str, dict[str, float]]
    samples: int
    denoising: dict[str, float] | None = None

    def __post_init__(self):
        assert self.rmse >= 0 and self.mae >= 0
        # quadratic mean >= arithmetic mean of |e|
        assert self.rmse >= self.mae - 1e-12 * max(1.0, self.mae)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def _unscale(values: np.ndarray, norm: NormState | None, channels: list[int]) -> np.ndarray:
    """Denormalize a (..., C_sel) array whose last axis holds ``channels``."""
    if norm is None:
        return values
    return norm.select(channels).unscale(values, channel_axis=values.ndim - 1)


def _metric_pair(pred, target) -> dict[str, float]:
    return {"rmse": rmse(pred, target), "mae": mae(pred, target)}


def baseline_predictions(windows: WindowSet) -> dict[str, np.ndarray]:
    """Normalized-unit predictions of the naive baselines, shaped like ``windows.targets``."""
    tc = windows.target_channels
    H = windows.horizon
    x = windows.inputs[:, :, tc]
    if windows.task == FORECAST:
        persistence = np.repeat(x[:, -1:, :], H, axis=1)
        ma = moving_average(x, MA_WIDTH, axis=1)
        moving = np.repeat(ma[:, -1:, :], H, axis=1)
    else:
        persistence = x[:, -H:, :]
        moving = moving_average(x, MA_WIDTH, axis=1)[:, -H:, :]
    return {"persistence": persistence, "moving_average": moving}


def baselines(windows: WindowSet) -> dict[str, dict[str, float]]:
    if len(windows) == 0:
        raise ValueError("baselines need at least one window")
    norm, tc = windows.norm, windows.target_channels
    target = _unscale(windows.targets, norm, tc)
    return {name: _metric_pair(_unscale(p, norm, tc), target)
            for name, p in baseline_predictions(windows).items()}


def evaluate(ckpt: Checkpoint, windows: WindowSet, batch_size: int = 256) -> MetricsReport:
    """Run the checkpoint over every window and score it in physical units.

    For the denoise task the window targets are the clean reference, so the
    input-to-clean and output-to-clean errors give the denoising gain.
    """
    cfg = ckpt.net_config
    want = (cfg.window, cfg.input_channels)
    if windows.inputs.shape[1:] != want or windows.targets.shape[1:] != (cfg.horizon, cfg.target_channels):
        raise ShapeError(
            f"checkpoint expects windows {want} -> {(cfg.horizon, cfg.target_channels)}, "
            f"got {windows.inputs.shape[1:]} -> {windows.targets.shape[1:]}"
        )
    if len(windows) == 0:
        raise ValueError("no windows to evaluate")
    norm = ckpt.norm if ckpt.norm is not None else windows.norm
    tc = list(windows.target_channels)
    pred, _ = ckpt.network().predict(windows.inputs, batch_size)
    pred_u = _unscale(pred, norm, tc)
    target_u = _unscale(windows.targets, norm, tc)

    per_channel = {}
    for j, c in enumerate(tc):
        per_channel[str(c)] = _metric_pair(pred_u[..., j], target_u[..., j])
    scored = WindowSet(windows.inputs, windows.targets, windows.starts, windows.task,
                       windows.stride, tc, norm)
    report_baselines = baselines(scored)

    denoising = None
    if windows.task == DENOISE:
        noisy_u = _unscale(windows.inputs[:, -cfg.horizon :, tc], norm, tc)
        input_rmse = rmse(noisy_u, target_u)
        output_rmse = rmse(pred_u, target_u)
        gain = 1.0 if input_rmse == 0 else output_rmse / input_rmse
        denoising = {"input_rmse_to_clean": input_rmse, "output_rmse_to_clean": output_rmse,
                     "gain_ratio": gain}
    return MetricsReport(windows.task, rmse(pred_u, target_u), mae(pred_u, target_u), per_channel,
                         report_baselines, int(pred_u.size), denoising)


@dataclass
class AttentionDump:
    starts: np.ndarray
    weights: np.ndarray  # N x L

    def validate(self) -> None:
        if np.any(self.weights < 0) or np.any(self.weights > 1):
            raise ValueError("attention weights outside [0, 1]")
        sums = self.weights.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-6)
        if bad.size:
            raise ValueError(f"attention row {int(bad[0])} sums to {sums[bad[0]]!r}")


def attention_weights(ckpt: Checkpoint, windows: WindowSet, batch_size: int = 256) -> AttentionDump:
    if not ckpt.net_config.attention:
        raise AttentionDisabledError("attention disabled in checkpoint config")
    _, alpha = ckpt.network().predict(windows.inputs, batch_size)
    dump = AttentionDump(np.asarray(windows.starts), alpha)
    dump.validate()
    return dump


def export_attention(ckpt: Checkpoint, windows: WindowSet, path: str | Path) -> AttentionDump:
    dump = attention_weights(ckpt, windows)
    L = dump.weights.shape[1]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window_start"] + [f"w_{i}" for i in range(L)])
        for s, row in zip(dump.starts, dump.weights):
            w.writerow([int(s)] + [f"{v:.17g}" for v in row])
    return dump


def read_attention_csv(path: str | Path) -> AttentionDump:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    return AttentionDump(data[:, 0].astype(int), data[:, 1:])
