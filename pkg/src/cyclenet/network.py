"""Network specs, builders, parameter counting and the 1x1 cycle dense equivalent."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ops
from .autodiff import Tape, Var
from .layers import FC_AXIS, BatchNorm, Conv, Dense, Dropout, Flatten, GlobalPool, Layer, ReLU, Resize
from .tensor import InvalidArgument, SeededRng

ORTHOGONAL_PLANES = ("xy", "xz", "yz")
STANDARD_PLANES = ("xy", "xy", "xy")
HEADS = ("global_pool", "flatten")


class InvalidSpec(ValueError):
    pass


@dataclass
class CycleSpec:
    kind: str = "orthogonal"
    kernel_size: int = 3
    out_shape: tuple[int, int, int] = (8, 8, 8)
    dropout_rate: float = 0.0

    @classmethod
    def cubic(cls, width: int, kind: str = "orthogonal", kernel_size: int = 3, dropout_rate: float = 0.0):
        return cls(kind, kernel_size, (width, width, width), dropout_rate)

    @property
    def planes(self) -> tuple[str, str, str]:
        return ORTHOGONAL_PLANES if self.kind == "orthogonal" else STANDARD_PLANES

    def validate(self):
        if self.kind not in ("orthogonal", "standard"):
            raise InvalidSpec(f"cycle kind must be 'orthogonal' or 'standard', got {self.kind!r}")
        if self.kernel_size < 1:
            raise InvalidSpec(f"kernel size must be >= 1, got {self.kernel_size}")
        if len(self.out_shape) != 3 or any(s < 1 for s in self.out_shape):
            raise InvalidSpec(f"cycle output shape must be three positive extents, got {self.out_shape}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidSpec(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")


@dataclass
class NetworkSpec:
    input_shape: tuple[int, int, int] = (32, 32, 1)
    first_features: int = 16
    first_kernel: int = 3
    cycles: list[CycleSpec] = field(default_factory=list)
    head: str = "flatten"
    n_classes: int = 2
    cubic: bool = True
    first_dropout: float = 0.0

    def validate(self):
        if len(self.input_shape) != 3 or any(s < 1 for s in self.input_shape):
            raise InvalidSpec(f"input_shape must be three positive extents, got {self.input_shape}")
        if self.first_features < 1 or self.first_kernel < 1:
            raise InvalidSpec("first conv needs positive features and kernel size")
        if self.head not in HEADS:
            raise InvalidSpec(f"head must be one of {HEADS}, got {self.head!r}")
        if self.n_classes < 1:
            raise InvalidSpec(f"n_classes must be >= 1, got {self.n_classes}")
        if not 0.0 <= self.first_dropout < 1.0:
            raise InvalidSpec(f"first_dropout must lie in [0, 1), got {self.first_dropout}")
        for i, c in enumerate(self.cycles):
            try:
                c.validate()
            except InvalidSpec as exc:
                raise InvalidSpec(f"cycle {i}: {exc}") from None
            if self.cubic and len(set(c.out_shape)) != 1:
                raise InvalidSpec(f"cycle {i}: cubic network needs X=Y=Z, got {c.out_shape}")

    # -------------------------------------------------------- text round trip

    def to_text(self) -> str:
        def shape(s):
            return str(s[0]) if self.cubic else "x".join(map(str, s))

        lines = [
            f"input_shape = {','.join(map(str, self.input_shape))}",
            f"first_features = {self.first_features}",
            f"first_kernel = {self.first_kernel}",
            f"first_dropout = {self.first_dropout!r}",
            f"cycles = {','.join(shape(c.out_shape) for c in self.cycles)}",
            f"kind = {','.join(c.kind for c in self.cycles)}",
            f"kernel_size = {','.join(str(c.kernel_size) for c in self.cycles)}",
            f"dropout = {','.join(repr(c.dropout_rate) for c in self.cycles)}",
            f"head = {self.head}",
            f"n_classes = {self.n_classes}",
            f"cubic = {'true' if self.cubic else 'false'}",
        ]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    @classmethod
    def from_mapping(cls, cfg: dict[str, str]) -> "NetworkSpec":
        """Build from ``key = value`` config entries (see :mod:`cyclenet.config`)."""
        def get(key, default=None):
            return cfg.get(key, default)

        def split(v):
            return [t.strip() for t in str(v).split(",") if t.strip()] if v is not None else []

        try:
            input_shape = tuple(int(v) for v in split(get("input_shape", "32,32,1")))
            cubic = str(get("cubic", "true")).lower() in ("1", "true", "yes")
            widths = split(get("cycles", ""))
            n = len(widths)

            def per_cycle(key, default, conv):
                vals = split(get(key, None))
                if not vals:
                    vals = [default]
                if len(vals) == 1:
                    vals = vals * n
                if len(vals) != n:
                    raise InvalidSpec(f"'{key}' lists {len(vals)} entries for {n} cycles")
                return [conv(v) for v in vals]

            kinds = per_cycle("kind", "orthogonal", str)
            kernels = per_cycle("kernel_size", "3", int)
            drops = per_cycle("dropout", "0.0", float)
            cycles = []
            for w, kind, k, d in zip(widths, kinds, kernels, drops):
                parts = [int(t) for t in w.lower().split("x")]
                if len(parts) == 1:
                    parts = parts * 3
                if len(parts) != 3:
                    raise InvalidSpec(f"cycle shape {w!r} must be a width or XxYxZ")
                cycles.append(CycleSpec(kind, k, tuple(parts), d))
            first_kernel = int(get("first_kernel", kernels[0] if kernels else 3))
            spec = cls(
                input_shape=input_shape,
                first_features=int(get("first_features", 16)),
                first_kernel=first_kernel,
                cycles=cycles,
                head=str(get("head", "flatten")),
                n_classes=int(get("n_classes", 2)),
                cubic=cubic,
                first_dropout=float(get("first_dropout", 0.0)),
            )
        except ValueError as exc:
            if isinstance(exc, InvalidSpec):
                raise
            raise InvalidSpec(f"malformed network config: {exc}") from None
        spec.validate()
        return spec


def build_hybrid(m_standard: int, n_orthogonal: int, widths, k: int = 3, **spec_kwargs) -> NetworkSpec:
    """``m_standard`` standard cycles followed by ``n_orthogonal`` orthogonal ones (cubic)."""
    if m_standard < 0 or n_orthogonal < 0:
        raise InvalidSpec("m and n must be nonnegative")
    total = m_standard + n_orthogonal
    if isinstance(widths, int):
        widths = [widths] * total
    widths = list(widths)
    if len(widths) != total:
        raise InvalidSpec(f"{len(widths)} widths for {total} cycles")
    dropout = spec_kwargs.pop("dropout_rate", 0.0)
    kinds = ["standard"] * m_standard + ["orthogonal"] * n_orthogonal
    cycles = [CycleSpec.cubic(w, kind, k, dropout) for w, kind in zip(widths, kinds)]
    spec_kwargs.setdefault("first_kernel", k)
    return NetworkSpec(cycles=cycles, cubic=True, **spec_kwargs)


# ------------------------------------------------------------------ builders


def _triplet(prefix, shape, plane, k, c_out, rate, rng, dtype) -> list[Layer]:
    conv = Conv(f"{prefix}.conv", shape, plane, k, c_out, rng, dtype)
    out = conv.out_shape
    return [conv, BatchNorm(f"{prefix}.bn", out, dtype=dtype), ReLU(f"{prefix}.relu", out),
            Dropout(f"{prefix}.drop", out, rate)]


def build_cycle(spec: CycleSpec, in_shape, prefix: str = "cycle", rng=None, dtype=np.float64) -> list[Layer]:
    """Three conv/BatchNorm/ReLU/Dropout triplets producing ``spec.out_shape``.

    Each orthogonal layer sets the output extent of its fully connected axis:
    the xy layer sets Z, the xz layer Y and the yz layer X. A standard cycle can
    only change Z, so its input must already have the target X and Y.
    """
    spec.validate()
    in_shape = tuple(in_shape)
    tx, ty, tz = spec.out_shape
    if spec.kind == "standard":
        if in_shape[:2] != (tx, ty):
            raise InvalidSpec(f"{prefix}: standard cycle cannot map spatial extents {in_shape[:2]} to {(tx, ty)}")
        targets = (tz, tz, tz)
    else:
        targets = (tz, ty, tx)
    layers: list[Layer] = []
    shape = in_shape
    for j, (plane, c_out) in enumerate(zip(spec.planes, targets)):
        layers += _triplet(f"{prefix}.{j}", shape, plane, spec.kernel_size, c_out, spec.dropout_rate, rng, dtype)
        shape = layers[-1].out_shape
    if shape != spec.out_shape:
        raise InvalidSpec(f"{prefix}: cycle produced {shape}, expected {spec.out_shape}")
    return layers


class Network:
    """A sequential stack of layers built from a :class:`NetworkSpec`.

    Node ``0`` is the input; node ``i`` is the output of ``layers[i - 1]``.
    """

    def __init__(self, spec: NetworkSpec, layers: list[Layer], cycle_ends: list[int], stem_end: int, dtype):
        self.spec = spec
        self.layers = layers
        self.cycle_ends = cycle_ends
        self.stem_end = stem_end
        self.dtype = dtype

    def __len__(self):
        return len(self.layers)

    def node_shape(self, index: int) -> tuple[int, ...]:
        return self.spec.input_shape if index == 0 else self.layers[index - 1].out_shape

    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{layer.name}.{k}": v for layer in self.layers for k, v in layer.params.items()}

    def regularized_names(self) -> list[str]:
        return [f"{layer.name}.{k}" for layer in self.layers for k in layer.regularized]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                out[f"{layer.name}.running_mean"] = layer.running_mean
                out[f"{layer.name}.running_var"] = layer.running_var
        return out

    def set_buffers(self, values: dict[str, np.ndarray]):
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                layer.running_mean = np.array(values[f"{layer.name}.running_mean"], dtype=np.float64)
                layer.running_var = np.array(values[f"{layer.name}.running_var"], dtype=np.float64)

    def convs(self) -> list[Conv]:
        return [layer for layer in self.layers if isinstance(layer, Conv)]

    def forward(self, x, train: bool = False, rng=None, tape: Tape | None = None,
                upto: int | None = None, input_grad: bool = True, keep_nodes: bool = False):
        """Run the stack on a batch ``x`` of shape (B, X, Y, C).

        With a ``tape`` the parameters become named leaves and the pass is
        recorded; returns ``(out, input_var, param_vars, nodes)``. Without a tape
        returns the output array. ``upto`` stops after node ``upto``.
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != tuple(self.spec.input_shape):
            raise InvalidArgument(f"input shape {x.shape[1:]} does not match network input {self.spec.input_shape}")
        if train and rng is None:
            raise InvalidArgument("training forward pass needs an rng for dropout")
        end = len(self.layers) if upto is None else upto
        if tape is None:
            h = x
            nodes = [h] if keep_nodes else None
            for layer in self.layers[:end]:
                h = layer.forward(h, layer.params, train, rng)
                if keep_nodes:
                    nodes.append(h)
            return (h, nodes) if keep_nodes else h
        xin = tape.leaf(x, "input") if input_grad else x
        pvars: dict[str, Var] = {}
        h = xin
        nodes = [h]
        for layer in self.layers[:end]:
            p = {}
            for k, v in layer.params.items():
                var = tape.leaf(v, f"{layer.name}.{k}")
                pvars[var.name] = var
                p[k] = var
            h = layer.forward(h, p, train, rng)
            nodes.append(h)
        return h, xin, pvars, nodes


def build_network(spec: NetworkSpec, seed: int | None = 0, dtype=np.float64) -> Network:
    """Assemble stem conv, cycles (with tri-linear resizes), head and dense output.

    ``seed=None`` leaves weights zero (useful for structural analysis only).
    """
    try:
        spec.validate()
    except InvalidSpec as exc:
        raise InvalidSpec(f"invalid network spec: {exc}") from None
    rng = None if seed is None else SeededRng(seed, 0x1417)
    layers: list[Layer] = _triplet("stem", spec.input_shape, "xy", spec.first_kernel, spec.first_features,
                                   spec.first_dropout, rng, dtype)
    stem_end = len(layers)
    cycle_ends = []
    shape = layers[-1].out_shape
    for i, cyc in enumerate(spec.cycles):
        target = cyc.out_shape
        if spec.cubic:
            need = target
        elif cyc.kind == "standard":
            need = (target[0], target[1], shape[2])
        else:
            need = shape
        if tuple(shape) != tuple(need):
            layers.append(Resize(f"resize{i}", shape, need))
            shape = need
        try:
            layers += build_cycle(cyc, shape, f"cycle{i}", rng, dtype)
        except InvalidSpec as exc:
            raise InvalidSpec(f"broken link at cycle {i}: {exc}") from None
        shape = layers[-1].out_shape
        cycle_ends.append(len(layers))
    if spec.head == "global_pool":
        layers.append(GlobalPool("head.pool", shape))
    else:
        layers.append(Flatten("head.flatten", shape))
    layers.append(Dense("head.dense", layers[-1].out_shape, spec.n_classes, rng, dtype))
    for prev, layer in zip(layers, layers[1:]):
        if prev.out_shape != layer.in_shape:
            raise InvalidSpec(f"broken link between {prev.name} and {layer.name}: {prev.out_shape} != {layer.in_shape}")
    return Network(spec, layers, cycle_ends, stem_end, dtype)


# ------------------------------------------------------------------ counting


@dataclass
class LayerCount:
    name: str
    plane: str
    kernel_params: int
    bias_params: int
    macs: int


@dataclass
class ParamCount:
    layers: list[LayerCount]
    batchnorm_params: int = 0

    @property
    def kernel_total(self) -> int:
        return sum(c.kernel_params for c in self.layers)

    @property
    def with_bias_total(self) -> int:
        return sum(c.kernel_params + c.bias_params for c in self.layers)

    @property
    def macs_total(self) -> int:
        return sum(c.macs for c in self.layers)

    def format(self) -> str:
        rows = [f"{'layer':<22}{'plane':>6}{'kernel':>12}{'bias':>8}{'MACs':>14}"]
        for c in self.layers:
            rows.append(f"{c.name:<22}{c.plane:>6}{c.kernel_params:>12}{c.bias_params:>8}{c.macs:>14}")
        rows.append(f"{'total':<22}{'':>6}{self.kernel_total:>12}"
                    f"{self.with_bias_total - self.kernel_total:>8}{self.macs_total:>14}")
        rows.append(f"kernel-only params: {self.kernel_total}")
        rows.append(f"params with bias:   {self.with_bias_total}")
        rows.append(f"batchnorm params:   {self.batchnorm_params}")
        return "\n".join(rows)


def conv_param_count(plane: str, k: int, in_shape, out_shape) -> tuple[int, int]:
    """(kernel params, MACs) of one convolution from the shape formulas."""
    xi, yi, zi = in_shape
    xo, yo, zo = out_shape
    if plane == "xy":
        return k * k * zi * zo, k * k * zi * zo * xo * yo
    if plane == "xz":
        return k * k * yi * yo, k * k * yi * yo * xo * zo
    if plane == "yz":
        return k * k * xi * xo, k * k * xi * xo * yo * zo
    raise InvalidArgument(f"unknown plane {plane!r}")


def count_params(spec: NetworkSpec) -> ParamCount:
    net = build_network(spec, seed=None)
    entries = []
    bn = 0
    for layer in net.layers:
        if isinstance(layer, Conv):
            kp, macs = conv_param_count(layer.plane, layer.k, layer.in_shape, layer.out_shape)
            entries.append(LayerCount(layer.name, layer.plane, kp, layer.c_out, macs))
        elif isinstance(layer, Dense):
            n_in = layer.in_shape[0]
            entries.append(LayerCount(layer.name, "dense", n_in * layer.n_out, layer.n_out, n_in * layer.n_out))
        elif isinstance(layer, BatchNorm):
            bn += sum(v.size for v in layer.params.values())
    return ParamCount(entries, bn)


# ----------------------------------------------------- dense equivalence (k=1)


def _matrix(kernel) -> np.ndarray:
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim == 4:
        if k.shape[:2] != (1, 1):
            raise InvalidArgument(f"dense equivalence holds only for 1x1 kernels, got {k.shape}")
        k = k[0, 0]
    if k.ndim != 2:
        raise InvalidArgument(f"expected a (1, 1, c_out, c_in) kernel or a matrix, got shape {k.shape}")
    return k


def cycle_dense_equivalent(k1, k2, k3) -> np.ndarray:
    """Dense operator of a linear 1x1 cycle over the row-major flattened (x, y, z).

    The entry for output (x, y, z) and input (x', y', z') is
    ``K3[x, x'] * K2[y, y'] * K1[z, z']``, i.e. ``kron(K3, K2, K1)``.
    """
    m1, m2, m3 = _matrix(k1), _matrix(k2), _matrix(k3)
    return np.kron(np.kron(m3, m2), m1)


def linear_cycle(x: np.ndarray, k1, k2, k3) -> np.ndarray:
    """One (X, Y, Z) cycle of 1x1 convolutions with BatchNorm/ReLU/Dropout as identity."""
    h = np.asarray(x, dtype=np.float64)[None]
    for plane, k in zip(ORTHOGONAL_PLANES, (k1, k2, k3)):
        k = np.asarray(k, dtype=np.float64)
        if k.shape[:2] != (1, 1):
            raise InvalidArgument("linear_cycle takes 1x1 kernels")
        h = ops.conv2d(h, k, plane=plane)
    return h[0]
