"""Finite-difference gradient checks for every differentiable layer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .layers import (AttentionLayer, Conv1DLayer, DenseLayer, RecurrentLayer, attention_forward,
                     conv1d_forward, dense_forward, recurrent_forward)
from .tensor import Tensor, grad_check
from .train import mse_loss

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class CheckRow:
    layer: str
    wrt: str
    seed: int
    max_rel_error: float
    passed: bool


def _projected(out: Tensor, proj: np.ndarray) -> Tensor:
    # fixed random projection keeps every output element in play
    return tn.sum_(out * proj)


def _case_conv(rng):
    x = rng.normal(size=(2, 10, 3))
    p = {"x": x, "kernel": rng.normal(size=(4, 3, 3)) * 0.5, "bias": rng.normal(size=4) * 0.1}
    proj = rng.normal(size=(2, 8, 4))

    def f(v):
        layer = Conv1DLayer(v["kernel"], v["bias"], "tanh")
        return _projected(conv1d_forward(v["x"], layer), proj)

    return p, f


def _case_conv_relu(rng):
    x = rng.normal(size=(2, 9, 2))
    p = {"x": x, "kernel": rng.normal(size=(3, 2, 4)) * 0.5, "bias": rng.normal(size=3) * 0.1}
    proj = rng.normal(size=(2, 6, 3))

    def f(v):
        layer = Conv1DLayer(v["kernel"], v["bias"], "relu")
        return _projected(conv1d_forward(v["x"], layer), proj)

    return p, f


def _case_recurrent(cell: str):
    def make(rng):
        G = 4 if cell == "lstm" else 3
        D, U, L = 3, 4, 5
        p = {
            "x": rng.normal(size=(2, L, D)),
            "w_x": rng.normal(size=(D, G * U)) * 0.5,
            "w_h": rng.normal(size=(U, G * U)) * 0.5,
            "bias": rng.normal(size=G * U) * 0.1,
        }
        proj = rng.normal(size=(2, L, U))

        def f(v):
            layer = RecurrentLayer(cell, v["w_x"], v["w_h"], v["bias"])
            return _projected(recurrent_forward(v["x"], layer), proj)

        return p, f

    return make


def _case_attention(rng):
    L, U = 6, 4
    p = {"h": rng.normal(size=(2, L, U)), "w": rng.normal(size=(U, U)) * 0.5,
         "b": rng.normal(size=U) * 0.1, "v": rng.normal(size=U)}
    proj = rng.normal(size=(2, U))
    proj_a = rng.normal(size=(2, L))

    def f(v):
        ctx, alpha = attention_forward(v["h"], AttentionLayer(v["w"], v["b"], v["v"]))
        return _projected(ctx, proj) + _projected(alpha, proj_a)

    return p, f


def _case_dense(rng):
    p = {"x": rng.normal(size=(3, 5)), "weight": rng.normal(size=(5, 4)) * 0.5,
         "bias": rng.normal(size=4) * 0.1}
    proj = rng.normal(size=(3, 4))

    def f(v):
        return _projected(dense_forward(v["x"], DenseLayer(v["weight"], v["bias"], "relu")), proj)

    return p, f


def _case_softmax(rng):
    p = {"x": rng.normal(size=(3, 6)) * 2}
    proj = rng.normal(size=(3, 6))
    return p, lambda v: _projected(tn.softmax(v["x"], axis=-1), proj)


def _case_mse(rng):
    p = {"pred": rng.normal(size=(2, 3, 2))}
    target = rng.normal(size=(2, 3, 2))
    return p, lambda v: mse_loss(v["pred"], target)


CASES: dict[str, Callable] = {
    "conv1d": _case_conv,
    "conv1d_relu": _case_conv_relu,
    "lstm": _case_recurrent("lstm"),
    "gru": _case_recurrent("gru"),
    "attention": _case_attention,
    "dense": _case_dense,
    "softmax": _case_softmax,
    "mse": _case_mse,
}


def check_case(name: str, seed: int, step: float = STEP, tolerance: float = TOLERANCE) -> list[CheckRow]:
    """Grad-check one layer w.r.t. each of its inputs and parameters."""
    rng = np.random.default_rng(seed)
    values, f = CASES[name](rng)
    rows = []
    for wrt in values:
        def g(t: Tensor, wrt=wrt):
            v = {k: (t if k == wrt else Tensor(a)) for k, a in values.items()}
            return f(v)

        rep = grad_check(g, values[wrt], step, tolerance)
        rows.append(CheckRow(name, wrt, seed, rep.max_rel_error, rep.passed))
    return rows


def run_suite(seeds=range(5), step: float = STEP, tolerance: float = TOLERANCE) -> list[CheckRow]:
    return [row for seed in seeds for name in CASES for row in check_case(name, seed, step, tolerance)]


def format_table(rows: list[CheckRow]) -> str:
    lines = [f"{'layer':<12} {'wrt':<8} {'seed':>4} {'max_rel_err':>12}  result"]
    for r in rows:
        lines.append(f"{r.layer:<12} {r.wrt:<8} {r.seed:>4} {r.max_rel_error:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
