"""Stateful layers wrapping :mod:`cyclenet.ops`.

Activation shapes are per-sample ``(X, Y, Z)`` triples; tensors flowing through
``forward`` carry a leading batch axis.
"""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .autodiff import Var
from .tensor import InvalidArgument

# which per-sample axis a plane's convolution treats as fully connected
FC_AXIS = {"xy": 2, "xz": 1, "yz": 0}


def he_uniform(rng, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    name: str = ""
    params: dict[str, np.ndarray]
    regularized: tuple[str, ...] = ()

    def __init__(self, name: str, in_shape: tuple[int, ...]):
        self.name = name
        self.in_shape = tuple(in_shape)
        self.params = {}

    @property
    def out_shape(self) -> tuple[int, ...]:
        return self.in_shape

    def forward(self, x, p, train: bool, rng):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, {self.in_shape} -> {self.out_shape})"


class Conv(Layer):
    """Same-padded stride-1 convolution over one of the planes xy, xz, yz.

    ``c_out`` is the new extent of the plane's fully connected axis.
    """

    regularized = ("w",)

    def __init__(self, name, in_shape, plane: str, k: int, c_out: int, rng=None, dtype=np.float64):
        super().__init__(name, in_shape)
        if plane not in FC_AXIS:
            raise InvalidArgument(f"unknown plane {plane!r}")
        if k < 1 or c_out < 1:
            raise InvalidArgument(f"{name}: kernel size and output extent must be >= 1")
        self.plane, self.k, self.c_out = plane, int(k), int(c_out)
        self.c_in = self.in_shape[FC_AXIS[plane]]
        shape = (self.k, self.k, self.c_out, self.c_in)
        fan_in = self.k * self.k * self.c_in
        if rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            w = he_uniform(rng, shape, fan_in, dtype)
        self.params = {"w": w, "b": np.zeros(self.c_out, dtype=dtype)}

    @property
    def out_shape(self):
        shape = list(self.in_shape)
        shape[FC_AXIS[self.plane]] = self.c_out
        return tuple(shape)

    @property
    def kernel_params(self) -> int:
        return self.k * self.k * self.c_in * self.c_out

    @property
    def op_factor(self) -> int:
        """How many times each kernel weight is applied per sample."""
        x, y, z = self.out_shape
        return {"xy": x * y, "xz": x * z, "yz": y * z}[self.plane]

    def forward(self, x, p, train, rng):
        # a raw (untracked) input needs no gradient
        return ops.conv2d(x, p["w"], p["b"], plane=self.plane, need_input_grad=isinstance(x, Var))


class BatchNorm(Layer):
    """Per-feature (z) normalization over batch and both spatial axes."""

    def __init__(self, name, in_shape, momentum: float = 0.9, eps: float = 1e-5, dtype=np.float64):
        super().__init__(name, in_shape)
        if eps <= 0:
            raise InvalidArgument(f"{name}: epsilon must be positive")
        if not 0.0 < momentum < 1.0:
            raise InvalidArgument(f"{name}: momentum must lie in (0, 1)")
        z = self.in_shape[-1]
        self.momentum, self.eps = momentum, eps
        self.params = {"gamma": np.ones(z, dtype=dtype), "beta": np.zeros(z, dtype=dtype)}
        self.running_mean = np.zeros(z, dtype=np.float64)
        self.running_var = np.ones(z, dtype=np.float64)

    def forward(self, x, p, train, rng):
        if not train:
            return ops.batch_norm_eval(x, p["gamma"], p["beta"], self.running_mean, self.running_var, self.eps)
        out, mean, var = ops.batch_norm_train(x, p["gamma"], p["beta"], self.eps)
        m = self.momentum
        self.running_mean = m * self.running_mean + (1 - m) * mean.astype(np.float64)
        self.running_var = m * self.running_var + (1 - m) * var.astype(np.float64)
        return out


class ReLU(Layer):
    def forward(self, x, p, train, rng):
        return ops.relu(x)


class Dropout(Layer):
    def __init__(self, name, in_shape, rate: float):
        super().__init__(name, in_shape)
        if not 0.0 <= rate < 1.0:
            raise InvalidArgument(f"{name}: dropout rate must lie in [0, 1)")
        self.rate = float(rate)

    def forward(self, x, p, train, rng):
        return ops.dropout(x, self.rate, train, rng)


class Resize(Layer):
    def __init__(self, name, in_shape, out_shape):
        super().__init__(name, in_shape)
        self._out = tuple(int(s) for s in out_shape)
        if any(s < 1 for s in self._out):
            raise InvalidArgument(f"{name}: resize target {self._out} has a zero extent")

    @property
    def out_shape(self):
        return self._out

    def forward(self, x, p, train, rng):
        return ops.resize(x, self._out)


class GlobalPool(Layer):
    @property
    def out_shape(self):
        return (self.in_shape[-1],)

    def forward(self, x, p, train, rng):
        return ops.global_pool(x)


class Flatten(Layer):
    @property
    def out_shape(self):
        return (int(np.prod(self.in_shape)),)

    def forward(self, x, p, train, rng):
        return ops.flatten(x)


class Dense(Layer):
    regularized = ("w",)

    def __init__(self, name, in_shape, n_out: int, rng=None, dtype=np.float64):
        super().__init__(name, in_shape)
        (n_in,) = self.in_shape
        self.n_out = int(n_out)
        if rng is None:
            w = np.zeros((self.n_out, n_in), dtype=dtype)
        else:
            w = he_uniform(rng, (self.n_out, n_in), n_in, dtype)
        self.params = {"w": w, "b": np.zeros(self.n_out, dtype=dtype)}

    @property
    def out_shape(self):
        return (self.n_out,)

    def forward(self, x, p, train, rng):
        return ops.dense(x, p["w"], p["b"])
