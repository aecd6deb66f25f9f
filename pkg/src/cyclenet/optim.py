"""SGD, RMSprop and Adam over named parameter dicts, plus the plateau LR rule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULTS = {
    "sgd": {},
    "rmsprop": {"rho": 0.9, "eps": 1e-7},
    "adam": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
}


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    hyper: dict = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def __post_init__(self):
        if self.kind not in DEFAULTS:
            raise ValueError(f"unknown optimizer {self.kind!r}")
        self.hyper = {**DEFAULTS[self.kind], **self.hyper}


def _check(params, grads):
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ValueError(f"missing gradient for {name}")
        if np.shape(g) != np.shape(p):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)} for {name}")


def _buffer(state, key, like):
    buf = state.buffers.get(key)
    if buf is None:
        buf = state.buffers[key] = np.zeros_like(like)
    return buf


def sgd_step(state: OptimizerState, params: dict, grads: dict) -> None:
    _check(params, grads)
    state.t += 1
    for name, p in params.items():
        p -= p.dtype.type(state.lr) * grads[name]


def rmsprop_step(state: OptimizerState, params: dict, grads: dict) -> None:
    """v <- rho v + (1 - rho) g^2;  theta <- theta - lr g / sqrt(v + eps), in place."""
    _check(params, grads)
    rho, eps = state.hyper["rho"], state.hyper["eps"]
    state.t += 1
    for name, p in params.items():
        g = grads[name]
        v = _buffer(state, f"v/{name}", p)
        v *= rho
        v += (1 - rho) * g * g
        p -= (state.lr * g / np.sqrt(v + eps)).astype(p.dtype)


def adam_step(state: OptimizerState, params: dict, grads: dict) -> None:
    """Bias-corrected Adam, in place."""
    _check(params, grads)
    b1, b2, eps = state.hyper["beta1"], state.hyper["beta2"], state.hyper["eps"]
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = _buffer(state, f"m/{name}", p)
        v = _buffer(state, f"v/{name}", p)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


STEPS = {"sgd": sgd_step, "rmsprop": rmsprop_step, "adam": adam_step}


def apply(state: OptimizerState, params: dict, grads: dict) -> None:
    STEPS[state.kind](state, params, grads)


def plateau_schedule(history: Sequence[float], base_lr: float, patience: int = 10,
                     factor: float = 10.0, min_delta: float = 1e-3) -> float:
    """Learning rate after the epochs in ``history`` (eval errors, oldest first).

    The rate is divided by ``factor`` whenever ``patience`` consecutive epochs fail
    to beat the best error by more than ``min_delta``; the wait counter restarts
    after each decay, so one window yields at most one decay.
    """
    if patience < 1:
        raise ValueError("patience must be >= 1")
    lr = base_lr
    best = None
    wait = 0
    for err in history:
        if best is None or err < best - min_delta:
            best = err
            wait = 0
            continue
        wait += 1
        if wait >= patience:
            lr /= factor
            wait = 0
    return lr
