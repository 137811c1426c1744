"""MSE loss, Adam, early-stopped mini-batch training and checkpoint files."""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tn
from .dataprep import NormState, WindowSet
from .layers import Network, NetworkConfig, param_shapes
from .tensor import Tensor


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    """Loss or gradient became non-finite; ``report`` holds the epochs completed so far."""

    def __init__(self, message: str, report: TrainReport | None = None):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 10
    min_delta: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be >= 1")
        if self.min_delta < 0:
            raise ValueError("min_delta must be >= 0")


# ------------------------------------------------------------------ loss
def mse_loss(pred: Tensor, target) -> Tensor:
    target = tn.as_tensor(target)
    if pred.shape != target.shape:
        raise tn.ShapeError(f"mse_loss: prediction shape {pred.shape} != target shape {target.shape}")
    return tn.mean(tn.square(pred - target))


# ------------------------------------------------------------------ adam
@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> AdamState:
    """One in-place Adam update of ``params``; returns ``state`` (also mutated)."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise tn.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in parameter {name!r}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        params[name].data -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return state


# -------------------------------------------------------- early stopping
class EarlyStopping:
    """Stop once ``patience`` consecutive epochs fail to beat the best loss by more than ``min_delta``."""

    def __init__(self, patience: int = 10, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = -1
        self.wait = 0

    def update(self, epoch: int, loss: float) -> tuple[bool, bool]:
        """Record ``loss``; returns ``(improved, should_stop)``."""
        if self.best - loss > self.min_delta or self.best_epoch < 0:
            self.best, self.best_epoch, self.wait = loss, epoch, 0
            return True, False
        self.wait += 1
        return False, self.wait >= self.patience


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopped_epoch: int = -1
    stop_reason: str = ""
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["best_so_far_val_loss"] = list(np.minimum.accumulate(self.val_loss)) if self.val_loss else []
        return d


# ------------------------------------------------------------ checkpoint
MAGIC = b"SHMD"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ManifestError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    net_config: NetworkConfig
    params: dict[str, np.ndarray]  # float32
    norm: NormState | None = None
    task: str = "forecast"
    target_channels: list[int] = field(default_factory=lambda: [0])
    version: int = FORMAT_VERSION

    @classmethod
    def from_network(cls, net: Network, norm: NormState | None, task: str,
                     target_channels: list[int]) -> Checkpoint:
        params = {k: v.data.astype("<f4") for k, v in net.params.items()}
        return cls(net.config, params, norm, task, list(target_channels))

    def network(self) -> Network:
        params = {k: Tensor(v.astype(np.float64), requires_grad=True, name=k) for k, v in self.params.items()}
        return Network(self.net_config, params)

    def header(self) -> dict:
        manifest, offset = [], 0
        for name, arr in self.params.items():
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size * 4
        return {
            "net_config": self.net_config.to_dict(),
            "norm_state": None if self.norm is None else self.norm.to_dict(),
            "task": self.task,
            "target_channels": list(self.target_channels),
            "manifest": manifest,
        }


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.header(), sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in ckpt.params.values())
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + payload


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    blob = checkpoint_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < 12:
        raise TruncatedCheckpointError(f"checkpoint is {len(blob)} bytes, shorter than the 12-byte preamble")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {FORMAT_VERSION}")
    if len(blob) < 12 + hlen:
        raise TruncatedCheckpointError("checkpoint header is truncated")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ManifestError(f"unreadable checkpoint header: {e}") from None
    payload = blob[12 + hlen :]
    try:
        config = NetworkConfig.from_dict(header["net_config"])
        manifest = header["manifest"]
    except (KeyError, TypeError) as e:
        raise ManifestError(f"checkpoint header missing field: {e}") from None
    expected = param_shapes(config)

    needed = sum(int(np.prod(e["shape"], dtype=np.int64)) * 4 for e in manifest)
    if len(payload) < needed:
        raise TruncatedCheckpointError(f"payload has {len(payload)} bytes, manifest needs {needed}")
    params: dict[str, np.ndarray] = {}
    spans = []
    for entry in manifest:
        name, shape, offset = entry["name"], tuple(entry["shape"]), int(entry["offset"])
        if name not in expected:
            raise ManifestError(f"manifest entry {name!r} is not a parameter of the stored config")
        if shape != expected[name]:
            raise ManifestError(f"manifest shape {shape} for {name} disagrees with config shape {expected[name]}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if offset < 0 or offset + nbytes > len(payload):
            raise ManifestError(f"manifest offset {offset} for {name} is out of bounds ({len(payload)} bytes)")
        spans.append((offset, offset + nbytes, name))
        params[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).copy()
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise ManifestError(f"manifest entries {an} and {bn} overlap")
    missing = set(expected) - set(params)
    if missing:
        raise ManifestError(f"checkpoint lacks parameters {sorted(missing)}")
    ordered = {k: params[k] for k in expected}
    norm = NormState.from_dict(header["norm_state"]) if header.get("norm_state") else None
    return Checkpoint(config, ordered, norm, header.get("task", "forecast"),
                      list(header.get("target_channels", range(config.target_channels))), version)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# ------------------------------------------------------------- training
def evaluate_loss(net: Network, windows: WindowSet, batch_size: int = 256) -> float:
    pred, _ = net.predict(windows.inputs, batch_size)
    return float(np.mean((pred - windows.targets) ** 2))


def _check_shapes(ws: WindowSet, cfg: NetworkConfig, label: str) -> None:
    if len(ws) == 0:
        raise TrainingError(f"{label} split is empty")
    want_in = (cfg.window, cfg.input_channels)
    want_out = (cfg.horizon, cfg.target_channels)
    if ws.inputs.shape[1:] != want_in or ws.targets.shape[1:] != want_out:
        raise tn.ShapeError(
            f"{label} windows {ws.inputs.shape[1:]}->{ws.targets.shape[1:]} do not match "
            f"network {want_in}->{want_out}"
        )


def fit(train: WindowSet, val: WindowSet, config: TrainConfig, net_config: NetworkConfig,
        norm: NormState | None = None,
        val_loss_fn: Callable[[int, Network], float] | None = None,
        on_epoch: Callable[[int, float, float], None] | None = None) -> tuple[Checkpoint, TrainReport]:
    """Train with Adam on MSE, early-stopping on validation loss.

    The returned checkpoint holds the best-validation-epoch parameters.
    ``val_loss_fn`` replaces the validation evaluation (used to inject loss
    sequences); ``on_epoch`` is called with ``(epoch, train_loss, val_loss)``.
    """
    config.validate()
    net_config.validate()
    _check_shapes(train, net_config, "train")
    _check_shapes(val, net_config, "validation")

    started = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    net = Network(net_config, seed=config.seed)
    state = AdamState()
    stopper = EarlyStopping(config.patience, config.min_delta)
    report = TrainReport()
    best_params = {k: v.data.copy() for k, v in net.params.items()}
    N = len(train)

    for epoch in range(config.max_epochs):
        order = rng.permutation(N)
        total = 0.0
        for lo in range(0, N, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            net.zero_grad()
            try:
                # overflow surfaces as NonFiniteError; numpy's own warning adds nothing
                with np.errstate(over="ignore", invalid="ignore"):
                    pred, _ = net(train.inputs[idx])
                    loss = mse_loss(pred, train.targets[idx])
                    tn.backward(loss)
                grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                         for k, p in net.params.items()}
                adam_step(net.params, grads, state, config)
            except (tn.NonFiniteError, DivergenceError) as e:
                report.stop_reason = "diverged"
                report.stopped_epoch = epoch
                report.wall_time_s = time.perf_counter() - started
                raise DivergenceError(f"epoch {epoch}: {e}", report) from e
            total += loss.item() * len(idx)
        train_loss = total / N
        val_loss = val_loss_fn(epoch, net) if val_loss_fn else evaluate_loss(net, val)
        if not math.isfinite(val_loss):
            report.stop_reason = "diverged"
            report.stopped_epoch = epoch
            raise DivergenceError(f"epoch {epoch}: non-finite validation loss", report)
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        if on_epoch:
            on_epoch(epoch, train_loss, val_loss)
        improved, stop = stopper.update(epoch, val_loss)
        if improved:
            best_params = {k: v.data.copy() for k, v in net.params.items()}
        report.stopped_epoch = epoch
        if stop:
            report.stop_reason = "early"
            break
    else:
        report.stop_reason = "max_epochs"

    report.best_epoch = stopper.best_epoch
    report.best_val_loss = stopper.best
    report.wall_time_s = time.perf_counter() - started
    if report.stop_reason == "early":
        assert report.stopped_epoch - report.best_epoch <= config.patience
    for k, p in net.params.items():
        p.data = best_params[k]
    target_channels = list(train.target_channels)
    return Checkpoint.from_network(net, norm, train.task, target_channels), report
