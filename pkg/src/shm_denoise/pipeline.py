"""Glue from an experiment config to normalized train/val/test window sets."""

from __future__ import annotations

from dataclasses import dataclass

from .config import ExperimentConfig
from .dataprep import (DENOISE, FORECAST, NormState, WindowSet, fit_normalizer, make_windows,
                       normalize, slice_series, split_chronological)
from .signalgen import SignalError, TimeSeries, add_noise, load_csv, synthesize_clean
from .train import Checkpoint, TrainReport, fit

SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    noisy: TimeSeries
    clean: TimeSeries | None


@dataclass
class Prepared:
    norm: NormState
    intervals: dict[str, tuple[int, int]]
    windows: dict[str, WindowSet]


def load_data(cfg: ExperimentConfig) -> Dataset:
    """Read the configured CSVs, or synthesize the bench record inline."""
    data = cfg.data
    if data["noisy_csv"]:
        noisy = load_csv(data["noisy_csv"])
        clean = load_csv(data["clean_csv"]) if data["clean_csv"] else None
        if clean is not None and clean.values.shape != noisy.values.shape:
            raise SignalError(f"clean CSV shape {clean.values.shape} != noisy CSV shape {noisy.values.shape}")
        return Dataset(noisy, clean)
    clean = synthesize_clean(cfg.signal)
    return Dataset(add_noise(clean, cfg.noise, cfg.noise_seed), clean)


def window_span(cfg: ExperimentConfig) -> int:
    return cfg.data["window"] + (cfg.data["horizon"] if cfg.data["task"] == FORECAST else 0)


def prepare(cfg: ExperimentConfig, ds: Dataset, norm: NormState | None = None) -> Prepared:
    """Split chronologically, fit min-max on train only, window every split.

    Pass ``norm`` (e.g. from a checkpoint) to reuse a stored scaling.
    """
    task = cfg.data["task"]
    if task == DENOISE and ds.clean is None:
        raise SignalError("denoise task needs a clean reference (data.clean_csv)")
    bounds = split_chronological(ds.noisy.length, cfg.data["splits"], window_span(cfg))
    intervals = dict(zip(SPLITS, bounds))
    if norm is None:
        norm = fit_normalizer(ds.noisy, intervals["train"])
    noisy_n = normalize(ds.noisy, norm)
    clean_n = normalize(ds.clean, norm) if ds.clean is not None else None
    windows = {}
    for name, iv in intervals.items():
        windows[name] = make_windows(
            slice_series(noisy_n, iv), cfg.data["window"], cfg.data["horizon"], cfg.data["stride"], task,
            clean=slice_series(clean_n, iv) if clean_n is not None else None,
            target_channels=cfg.data["target_channels"], norm=norm,
        )
        windows[name].starts = windows[name].starts + iv[0]
    return Prepared(norm, intervals, windows)


def train_experiment(cfg: ExperimentConfig, ds: Dataset | None = None, **fit_kwargs) -> tuple[Checkpoint, TrainReport, Prepared]:
    ds = ds if ds is not None else load_data(cfg)
    prep = prepare(cfg, ds)
    ckpt, report = fit(prep.windows["train"], prep.windows["val"], cfg.train, cfg.model, prep.norm, **fit_kwargs)
    return ckpt, report, prep
