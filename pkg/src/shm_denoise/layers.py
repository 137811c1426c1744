"""Conv1D -> recurrent -> additive attention -> dense network.

All layer functions accept inputs with arbitrary leading batch dimensions:
a single window is ``(W, C)``, a batch is ``(B, W, C)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import Tensor

ACTIVATIONS = {"relu": tn.relu, "tanh": tn.tanh, "identity": tn.identity}
CELLS = ("lstm", "gru")
GATES = {"lstm": 4, "gru": 3}


class ConfigError(ValueError):
    """Inconsistent network configuration."""


# ---------------------------------------------------------------- config
@dataclass
class ConvSpec:
    filters: int = 8
    kernel: int = 5
    activation: str = "relu"


@dataclass
class RecurrentSpec:
    cell: str = "gru"
    hidden: int = 32


@dataclass
class NetworkConfig:
    window: int
    input_channels: int
    horizon: int = 1
    target_channels: int = 1
    conv: list[ConvSpec] = field(default_factory=lambda: [ConvSpec()])
    recurrent: list[RecurrentSpec] = field(default_factory=lambda: [RecurrentSpec()])
    attention: bool = True
    dense: list[int] = field(default_factory=lambda: [32])
    dense_activation: str = "relu"

    @property
    def output_width(self) -> int:
        return self.horizon * self.target_channels

    @property
    def sequence_length(self) -> int:
        """Number of time steps left after the valid-padded conv stack."""
        return self.window - sum(c.kernel - 1 for c in self.conv)

    def validate(self) -> None:
        if self.window < 1 or self.input_channels < 1:
            raise ConfigError("window and input_channels must be positive")
        if self.horizon < 1 or self.target_channels < 1:
            raise ConfigError("horizon and target_channels must be positive")
        for i, c in enumerate(self.conv):
            if c.kernel < 1 or c.filters < 1:
                raise ConfigError(f"conv[{i}]: kernel and filters must be >= 1")
            if c.activation not in ACTIVATIONS:
                raise ConfigError(f"conv[{i}].activation {c.activation!r} not in {sorted(ACTIVATIONS)}")
        for i, r in enumerate(self.recurrent):
            if r.cell not in CELLS:
                raise ConfigError(f"recurrent[{i}].cell {r.cell!r} not in {CELLS}")
            if r.hidden < 1:
                raise ConfigError(f"recurrent[{i}].hidden must be >= 1")
        if self.attention and not self.recurrent:
            raise ConfigError("attention needs at least one recurrent layer")
        if any(d < 1 for d in self.dense):
            raise ConfigError("dense widths must be >= 1")
        if self.dense_activation not in ("relu", "identity"):
            raise ConfigError("dense_activation must be 'relu' or 'identity'")
        if self.sequence_length < 1:
            raise ConfigError(
                f"conv stack consumes the whole window: W={self.window}, "
                f"kernels {[c.kernel for c in self.conv]} leave L={self.sequence_length}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> NetworkConfig:
        d = dict(d)
        d["conv"] = [ConvSpec(**c) for c in d.get("conv", [])]
        d["recurrent"] = [RecurrentSpec(**r) for r in d.get("recurrent", [])]
        return cls(**d)


# ---------------------------------------------------------------- layers
@dataclass
class Conv1DLayer:
    kernel: Tensor  # F x C_in x K
    bias: Tensor
    activation: str = "relu"


@dataclass
class RecurrentLayer:
    cell: str
    w_x: Tensor  # D x G*U, gate blocks side by side
    w_h: Tensor  # U x G*U
    bias: Tensor  # G*U

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_x.shape[0]


@dataclass
class AttentionLayer:
    w: Tensor  # U x U
    b: Tensor  # U
    v: Tensor  # U


@dataclass
class DenseLayer:
    weight: Tensor  # in x out
    bias: Tensor
    activation: str = "identity"


def conv1d_forward(x: Tensor, layer: Conv1DLayer) -> Tensor:
    return ACTIVATIONS[layer.activation](tn.conv1d(x, layer.kernel, layer.bias))


def recurrent_forward(x: Tensor, layer: RecurrentLayer, h0: Tensor | None = None,
                      c0: Tensor | None = None) -> Tensor:
    """Run the cell over the time axis (-2); returns every hidden state, (..., L, U).

    LSTM gate order is input, forget, cell, output.  The GRU uses update and
    reset gates with the reset applied to the recurrent part of the candidate:
    ``n = tanh(x W_n + b_n + r * (h U_n))``, ``h' = (1 - z) n + z h``.
    """
    x = tn.as_tensor(x)
    if x.ndim < 2 or x.shape[-1] != layer.input_size:
        raise tn.ShapeError(
            f"recurrent input shape {x.shape} does not match input_size {layer.input_size}"
        )
    U = layer.hidden_size
    L = x.shape[-2]
    lead = x.shape[:-2]
    h = h0 if h0 is not None else Tensor(np.zeros(lead + (U,)))
    proj = x @ layer.w_x + layer.bias
    states = []
    if layer.cell == "lstm":
        c = c0 if c0 is not None else Tensor(np.zeros(lead + (U,)))
        for t in range(L):
            a = proj[..., t, :] + h @ layer.w_h
            s = tn.sigmoid(a)
            i, f, o = s[..., :U], s[..., U : 2 * U], s[..., 3 * U :]
            g = tn.tanh(a[..., 2 * U : 3 * U])
            c = f * c + i * g
            h = o * tn.tanh(c)
            states.append(h)
    elif layer.cell == "gru":
        for t in range(L):
            xt = proj[..., t, :]
            hp = h @ layer.w_h
            zr = tn.sigmoid(xt[..., : 2 * U] + hp[..., : 2 * U])
            z, r = zr[..., :U], zr[..., U:]
            n = tn.tanh(xt[..., 2 * U :] + r * hp[..., 2 * U :])
            h = n + z * (h - n)
            states.append(h)
    else:
        raise ConfigError(f"unknown cell {layer.cell!r}")
    return tn.stack(states, axis=-2)


def attention_forward(hseq: Tensor, layer: AttentionLayer) -> tuple[Tensor, Tensor]:
    """Additive attention over time steps.

    ``e_t = v . tanh(W h_t + b)``, ``alpha = softmax(e)``,
    ``context = sum_t alpha_t h_t``.  Returns ``(context, alpha)``.
    """
    hseq = tn.as_tensor(hseq)
    if hseq.ndim < 2 or hseq.shape[-2] < 1:
        raise tn.ShapeError(f"attention needs a non-empty (..., L, U) sequence, got {hseq.shape}")
    *lead, L, U = hseq.shape
    scores = tn.tanh(hseq @ layer.w + layer.b) @ layer.v.reshape(U, 1)
    alpha = tn.softmax(scores.reshape(*lead, L), axis=-1)
    context = alpha.reshape(*lead, 1, L) @ hseq
    return context.reshape(*lead, U), alpha


def dense_forward(x: Tensor, layer: DenseLayer) -> Tensor:
    return ACTIVATIONS[layer.activation](x @ layer.weight + layer.bias)


# --------------------------------------------------------------- network
def param_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes for ``config``."""
    shapes: dict[str, tuple[int, ...]] = {}
    width = config.input_channels
    for i, c in enumerate(config.conv):
        shapes[f"conv{i}.kernel"] = (c.filters, width, c.kernel)
        shapes[f"conv{i}.bias"] = (c.filters,)
        width = c.filters
    for i, r in enumerate(config.recurrent):
        G = GATES[r.cell]
        shapes[f"rnn{i}.w_x"] = (width, G * r.hidden)
        shapes[f"rnn{i}.w_h"] = (r.hidden, G * r.hidden)
        shapes[f"rnn{i}.bias"] = (G * r.hidden,)
        width = r.hidden
    if config.attention:
        shapes["attn.w"] = (width, width)
        shapes["attn.b"] = (width,)
        shapes["attn.v"] = (width,)
    elif not config.recurrent:
        width = config.sequence_length * width
    for i, d in enumerate(config.dense):
        shapes[f"dense{i}.weight"] = (width, d)
        shapes[f"dense{i}.bias"] = (d,)
        width = d
    shapes["out.weight"] = (width, config.output_width)
    shapes["out.bias"] = (config.output_width,)
    return shapes


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(config: NetworkConfig, seed: int = 0) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases, LSTM forget-gate bias 1."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        kind = name.split(".", 1)[1]
        if kind in ("bias", "b"):
            data = np.zeros(shape)
            if name.startswith("rnn"):
                spec = config.recurrent[int(name[3 : name.index(".")])]
                if spec.cell == "lstm":
                    U = spec.hidden
                    data[U : 2 * U] = 1.0
        elif kind == "kernel":
            F, C, K = shape
            data = rng.uniform(-1, 1, shape) * glorot_bound(C * K, F * K)
        elif kind in ("w_x", "w_h"):
            # one Glorot draw per gate block
            D, GU = shape
            spec = config.recurrent[int(name[3 : name.index(".")])]
            U = spec.hidden
            blocks = [rng.uniform(-1, 1, (D, U)) * glorot_bound(D, U) for _ in range(GU // U)]
            data = np.concatenate(blocks, axis=1)
        elif kind == "v":
            data = rng.uniform(-1, 1, shape) * glorot_bound(shape[0], 1)
        else:
            data = rng.uniform(-1, 1, shape) * glorot_bound(shape[0], shape[1])
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def zero_params(config: NetworkConfig) -> dict[str, Tensor]:
    return {n: Tensor(np.zeros(s), requires_grad=True, name=n) for n, s in param_shapes(config).items()}


def build_layers(config: NetworkConfig, params: dict[str, Tensor]):
    expected = param_shapes(config)
    missing = set(expected) - set(params)
    if missing:
        raise ConfigError(f"missing parameters: {sorted(missing)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ConfigError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
    convs = [Conv1DLayer(params[f"conv{i}.kernel"], params[f"conv{i}.bias"], c.activation)
             for i, c in enumerate(config.conv)]
    rnns = [RecurrentLayer(r.cell, params[f"rnn{i}.w_x"], params[f"rnn{i}.w_h"], params[f"rnn{i}.bias"])
            for i, r in enumerate(config.recurrent)]
    attn = AttentionLayer(params["attn.w"], params["attn.b"], params["attn.v"]) if config.attention else None
    dense = [DenseLayer(params[f"dense{i}.weight"], params[f"dense{i}.bias"], config.dense_activation)
             for i in range(len(config.dense))]
    out = DenseLayer(params["out.weight"], params["out.bias"], "identity")
    return convs, rnns, attn, dense, out


def network_forward(window, config: NetworkConfig, params: dict[str, Tensor]) -> tuple[Tensor, Tensor | None]:
    """Prediction ``(..., H, C_t)`` and attention weights ``(..., L)`` (None without attention)."""
    x = tn.as_tensor(window)
    if x.ndim < 2 or x.shape[-2:] != (config.window, config.input_channels):
        raise tn.ShapeError(
            f"input shape {x.shape} does not match configured window "
            f"({config.window}, {config.input_channels})"
        )
    if config.sequence_length < 1:
        raise ConfigError(f"conv stack leaves L={config.sequence_length} < 1 steps")
    lead = x.shape[:-2]
    convs, rnns, attn, dense, out = build_layers(config, params)
    for layer in convs:
        x = conv1d_forward(x, layer)
    for layer in rnns:
        x = recurrent_forward(x, layer)
    alpha = None
    if attn is not None:
        x, alpha = attention_forward(x, attn)
    elif rnns:
        x = x[..., -1, :]
    else:
        x = x.reshape(*lead, x.shape[-2] * x.shape[-1])
    for layer in dense:
        x = dense_forward(x, layer)
    y = dense_forward(x, out)
    return y.reshape(*lead, config.horizon, config.target_channels), alpha


class Network:
    """Config plus parameters, callable on raw arrays."""

    def __init__(self, config: NetworkConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        config.validate()
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def __call__(self, x) -> tuple[Tensor, Tensor | None]:
        return network_forward(x, self.config, self.params)

    def predict(self, inputs: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray | None]:
        """Inference without recording a graph."""
        frozen = {k: Tensor(v.data) for k, v in self.params.items()}
        preds, alphas = [], []
        for lo in range(0, len(inputs), batch_size):
            y, a = network_forward(inputs[lo : lo + batch_size], self.config, frozen)
            preds.append(y.data)
            if a is not None:
                alphas.append(a.data)
        pred = np.concatenate(preds) if preds else np.zeros((0, self.config.horizon, self.config.target_channels))
        return pred, (np.concatenate(alphas) if alphas else None)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
