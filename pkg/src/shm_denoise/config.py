"""Experiment configuration: one JSON document, sections with defaults.

The default document is the desk-scale bench used by the acceptance suite:
two lightly damped modes (10 Hz, 27 Hz) seen by three sensors at 256 Hz for
16 s, contaminated by all three noise classes.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .dataprep import TASKS, DataError, split_chronological
from .layers import ConfigError, ConvSpec, NetworkConfig, RecurrentSpec
from .signalgen import EnvTone, Mode, ModalSignalSpec, NoiseSpec, SignalError
from .train import TrainConfig

SEED_ENV = "SHM_DENOISE_SEED"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "signal": {
        "modes": [
            {"frequency_hz": 10.0, "damping_ratio": 0.01, "amplitude": 1.0, "phase_rad": 0.0,
             "shape": [1.0, 0.6, -0.4]},
            {"frequency_hz": 27.0, "damping_ratio": 0.01, "amplitude": 0.6, "phase_rad": 1.0,
             "shape": [0.5, -0.8, 1.0]},
        ],
        "sample_rate_hz": 256.0,
        "duration_s": 16.0,
        "channels": 3,
    },
    "noise": {
        "instrumental_sigma": 0.05,
        "env_interference": {"frequency_hz": 60.0, "amplitude": 0.1, "phase_rad": 0.0},
        "env_drift_scale": 0.002,
        "op_burst_rate_hz": 0.5,
        "op_burst_amplitude": 0.3,
        "op_burst_decay_s": 0.05,
        "target_snr_db": 10.0,
    },
    "data": {
        "window": 64,
        "horizon": 1,
        "stride": 1,
        "task": "forecast",
        "splits": [0.7, 0.15, 0.15],
        "target_channels": None,
        "noisy_csv": None,
        "clean_csv": None,
    },
    "model": {
        "conv": [{"filters": 8, "kernel": 5, "activation": "relu"}],
        "recurrent": [{"cell": "gru", "hidden": 32}],
        "attention": True,
        "dense": [32],
        "dense_activation": "relu",
    },
    "train": {
        "learning_rate": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
        "batch_size": 32,
        "max_epochs": 50,
        "patience": 10,
        "min_delta": 0.0,
    },
    "eval": {"metrics": "metrics.json", "attention": "attention.csv", "split": "test"},
}


class ConfigValidationError(ValueError):
    """Invalid experiment configuration; the message starts with the field path."""


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigValidationError(f"{where}: unknown key")
        if isinstance(base[k], dict) and isinstance(v, dict) and k != "env_interference":
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, assignment: str) -> None:
    """Apply ``section.key=value`` (list indices allowed: ``signal.modes.0.frequency_hz=5``)."""
    if "=" not in assignment:
        raise ConfigValidationError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node: Any = doc
    for i, p in enumerate(parts[:-1]):
        node = _step(node, p, ".".join(parts[: i + 1]))
    last = parts[-1]
    if isinstance(node, list):
        node[_index(node, last, key)] = _parse_value(raw)
    elif isinstance(node, dict):
        if last not in node:
            raise ConfigValidationError(f"{key}: unknown key")
        node[last] = _parse_value(raw)
    else:
        raise ConfigValidationError(f"{key}: cannot assign into a scalar")


def _index(node: list, p: str, where: str) -> int:
    try:
        i = int(p)
        node[i]
        return i
    except (ValueError, IndexError):
        raise ConfigValidationError(f"{where}: bad list index {p!r}") from None


def _step(node: Any, p: str, where: str) -> Any:
    if isinstance(node, list):
        return node[_index(node, p, where)]
    if isinstance(node, dict) and p in node and node[p] is not None:
        return node[p]
    raise ConfigValidationError(f"{where}: unknown key")


def load_document(path: str | Path | None, overrides: list[str] = (), env: dict | None = None) -> dict:
    """Defaults <- JSON file <- ``--set`` overrides <- ``SHM_DENOISE_SEED``."""
    doc = copy.deepcopy(DEFAULTS)
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            user = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigValidationError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(user, dict):
            raise ConfigValidationError(f"{path}: top level must be an object")
        doc = _merge(doc, user)
    for a in overrides:
        apply_override(doc, a)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            doc["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigValidationError(f"{SEED_ENV}: not an integer") from None
    return doc


@dataclass
class ExperimentConfig:
    seed: int
    signal: ModalSignalSpec
    noise: NoiseSpec
    data: dict
    model: NetworkConfig
    train: TrainConfig
    eval: dict
    document: dict

    @property
    def noise_seed(self) -> int:
        return self.seed + 1


def _build(cls, d: dict, where: str):
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigValidationError(f"{where}: {e}") from None


def resolve(doc: dict, input_channels: int | None = None) -> ExperimentConfig:
    """Validate every section and cross-section constraint before any work."""
    seed = doc["seed"]
    if not isinstance(seed, int) or seed < 0:
        raise ConfigValidationError("seed: must be a non-negative integer")

    s = dict(doc["signal"])
    modes = [_build(Mode, m, f"signal.modes[{i}]") for i, m in enumerate(s.pop("modes"))]
    signal = _build(ModalSignalSpec, {**s, "modes": modes, "seed": seed}, "signal")
    try:
        signal.validate()
    except SignalError as e:
        raise ConfigValidationError(f"signal.{e}") from None

    n = dict(doc["noise"])
    tone = n.pop("env_interference")
    noise = _build(NoiseSpec, {**n, "env_interference": _build(EnvTone, tone, "noise.env_interference") if tone else None}, "noise")
    try:
        noise.validate()
    except SignalError as e:
        raise ConfigValidationError(f"noise.{e}") from None

    data = dict(doc["data"])
    if data["task"] not in TASKS:
        raise ConfigValidationError(f"data.task: must be one of {TASKS}")
    for k in ("window", "horizon", "stride"):
        if not isinstance(data[k], int) or data[k] < 1:
            raise ConfigValidationError(f"data.{k}: must be a positive integer")
    channels = input_channels if input_channels is not None else signal.channels
    tc = data["target_channels"]
    if tc is None:
        tc = list(range(channels))
    if not tc or any((not isinstance(c, int)) or not 0 <= c < channels for c in tc):
        raise ConfigValidationError(f"data.target_channels: {tc} out of range for {channels} channels")
    data["target_channels"] = list(tc)

    m = dict(doc["model"])
    model = NetworkConfig(
        window=data["window"], input_channels=channels, horizon=data["horizon"],
        target_channels=len(tc),
        conv=[_build(ConvSpec, c, f"model.conv[{i}]") for i, c in enumerate(m["conv"])],
        recurrent=[_build(RecurrentSpec, r, f"model.recurrent[{i}]") for i, r in enumerate(m["recurrent"])],
        attention=m["attention"], dense=list(m["dense"]), dense_activation=m["dense_activation"],
    )
    try:
        model.validate()
    except ConfigError as e:
        raise ConfigValidationError(f"model: {e}") from None

    train = _build(TrainConfig, {**doc["train"], "seed": seed}, "train")
    try:
        train.validate()
    except ValueError as e:
        raise ConfigValidationError(f"train: {e}") from None

    if data["noisy_csv"] is None:
        span = data["window"] + (data["horizon"] if data["task"] == "forecast" else 0)
        try:
            split_chronological(signal.length, data["splits"], span)
        except DataError as e:
            raise ConfigValidationError(f"data.splits: {e}") from None
    if doc["eval"].get("split", "test") not in ("train", "val", "test"):
        raise ConfigValidationError("eval.split: must be train, val or test")
    return ExperimentConfig(seed, signal, noise, data, model, train, dict(doc["eval"]), doc)
