"""Receptive fields: gradient saliency statistics and exact structural dependency.

Node indices follow :meth:`Network.node_shape`: node 0 is the input image and
node ``i`` is the output of layer ``i - 1``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .layers import FC_AXIS, Conv, Dense, Flatten, GlobalPool, Resize
from .network import Network, NetworkSpec, build_network
from .tensor import InvalidArgument, SeededRng, interpolation_matrix

PROFILE_FIELDS = ("depth", "layers", "mean_norm_rf", "std_norm_rf", "n_samples")


class DegenerateSaliency(ValueError):
    """The chosen activation has an identically zero input gradient."""


@dataclass
class SaliencyMap:
    density: np.ndarray  # (X, Y), nonnegative, sums to 1
    source: dict = field(default_factory=dict)


@dataclass
class RFStats:
    size: float
    center: np.ndarray
    covariance: np.ndarray
    ellipse_axes: np.ndarray  # semi-axes at 3 standard deviations, major first
    ellipse_angle: float  # radians, major axis measured from +x toward +y
    normalized_size: float


def _image_batch(net: Network, image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape != tuple(net.spec.input_shape):
        raise InvalidArgument(f"image shape {img.shape} does not match network input {net.spec.input_shape}")
    return img[None]


def _check_coords(shape, coords) -> tuple[int, ...]:
    coords = tuple(int(c) for c in coords)
    if len(coords) != len(shape) or any(not 0 <= c < s for c, s in zip(coords, shape)):
        raise InvalidArgument(f"activation coordinates {coords} are outside node shape {shape}")
    return coords


def _normalize(raw: np.ndarray, coords, source: dict) -> SaliencyMap:
    total = float(raw.sum())
    if total <= 0.0 or not math.isfinite(total):
        raise DegenerateSaliency(f"activation {coords} has a zero input gradient")
    return SaliencyMap(raw / total, source)


def saliency_maps(net: Network, layer_index: int, coords_list, image) -> list[SaliencyMap | None]:
    """One eval-mode forward pass, one backward sweep per activation.

    Entries whose gradient vanishes come back as ``None``.
    """
    if not 0 <= layer_index <= len(net.layers):
        raise InvalidArgument(f"layer index {layer_index} outside 0..{len(net.layers)}")
    shape = net.node_shape(layer_index)
    coords_list = [_check_coords(shape, c) for c in coords_list]
    x = _image_batch(net, image)
    tape = Tape()
    _, xin, _, nodes = net.forward(x, train=False, tape=tape, upto=layer_index)
    out = nodes[layer_index]
    result = []
    for coords in coords_list:
        seed = np.zeros(out.value.shape, dtype=out.value.dtype)
        seed[(0,) + coords] = 1.0
        g = tape.backward(out, seed)[xin][0]
        raw = np.abs(g.astype(np.float64)).sum(axis=-1)
        try:
            result.append(_normalize(raw, coords, {"layer_index": layer_index, "coords": coords}))
        except DegenerateSaliency:
            result.append(None)
    tape.release()
    return result


def saliency_map(net: Network, layer_index: int, coords, image) -> SaliencyMap:
    """Normalized channel-summed |d activation / d input| for one activation."""
    (sal,) = saliency_maps(net, layer_index, [coords], image)
    if sal is None:
        raise DegenerateSaliency(f"activation {tuple(coords)} at node {layer_index} has a zero input gradient")
    return sal


def rf_stats(sal, resolution: float | None = None) -> RFStats:
    """Moments of the density as a distribution over pixel coordinates (x, y)."""
    p = np.asarray(sal.density if isinstance(sal, SaliencyMap) else sal, dtype=np.float64)
    if p.ndim != 2 or np.any(p < 0):
        raise InvalidArgument("saliency density must be a nonnegative 2-D grid")
    p = p / p.sum()
    if resolution is None:
        resolution = max(p.shape)
    xs = np.arange(p.shape[0], dtype=np.float64)
    ys = np.arange(p.shape[1], dtype=np.float64)
    px, py = p.sum(axis=1), p.sum(axis=0)
    center = np.array([px @ xs, py @ ys])
    dx, dy = xs - center[0], ys - center[1]
    cxx = px @ (dx * dx)
    cyy = py @ (dy * dy)
    cxy = dx @ p @ dy
    cov = np.array([[cxx, cxy], [cxy, cyy]])
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)[::-1]
    major = evecs[:, -1]
    size = math.sqrt(max(cxx + cyy, 0.0))
    return RFStats(size=size, center=center, covariance=cov, ellipse_axes=3.0 * np.sqrt(evals),
                   ellipse_angle=float(math.atan2(major[1], major[0])), normalized_size=size / resolution)


# ------------------------------------------------------------ structural masks


def _dilate(mask: np.ndarray, axis: int, k: int) -> np.ndarray:
    """Input positions reachable by a same-padded k-tap window along ``axis``."""
    lo = -(k // 2)
    n = mask.shape[axis]
    out = np.zeros_like(mask)
    for d in range(lo, lo + k):
        # output x reads input x + d
        src = [slice(None)] * mask.ndim
        dst = [slice(None)] * mask.ndim
        if d >= 0:
            src[axis], dst[axis] = slice(0, n - d), slice(d, n)
        else:
            src[axis], dst[axis] = slice(-d, n), slice(0, n + d)
        out[tuple(dst)] |= mask[tuple(src)]
    return out


def _layer_preimage(layer, mask: np.ndarray) -> np.ndarray:
    if isinstance(layer, Conv):
        fc = FC_AXIS[layer.plane]
        reach = mask.any(axis=fc, keepdims=True)
        for axis in range(3):
            if axis != fc:
                reach = _dilate(reach, axis, layer.k)
        return np.broadcast_to(reach, layer.in_shape).copy()
    if isinstance(layer, Resize):
        m = mask.astype(np.float64)
        for axis, (a, b) in enumerate(zip(layer.in_shape, layer.out_shape)):
            support = (interpolation_matrix(a, b) != 0).astype(np.float64)
            m = np.moveaxis(np.tensordot(support.T, np.moveaxis(m, axis, 0), axes=1), 0, axis)
        return m > 0
    if isinstance(layer, GlobalPool):
        return np.broadcast_to(mask, layer.in_shape).copy()
    if isinstance(layer, Flatten):
        return mask.reshape(layer.in_shape)
    if isinstance(layer, Dense):
        return np.full(layer.in_shape, bool(mask.any()))
    # BatchNorm (eval statistics), ReLU and Dropout act elementwise
    return mask


def connectivity_mask(spec_or_net, layer_index: int, coords) -> np.ndarray:
    """Boolean mask over the input tensor of every element the activation can read.

    Weights are irrelevant; only each layer's access pattern is used.
    """
    net = spec_or_net if isinstance(spec_or_net, Network) else build_network(spec_or_net, seed=None)
    if not 0 <= layer_index <= len(net.layers):
        raise InvalidArgument(f"layer index {layer_index} outside 0..{len(net.layers)}")
    shape = net.node_shape(layer_index)
    coords = _check_coords(shape, coords)
    mask = np.zeros(shape, dtype=bool)
    mask[coords] = True
    for layer in reversed(net.layers[:layer_index]):
        mask = _layer_preimage(layer, mask)
    return mask


def spatial_mask(mask: np.ndarray) -> np.ndarray:
    """Project a (X, Y, C) dependency mask onto the image plane."""
    return mask.any(axis=-1)


# ------------------------------------------------------------- depth profile


@dataclass
class ProfileRow:
    depth: int
    layers: int
    mean_norm_rf: float
    std_norm_rf: float
    n_samples: int
    sizes: list[float] = field(default_factory=list, repr=False)


def profile_nodes(net: Network) -> list[tuple[int, int, int]]:
    """(depth in cycles, conv layers so far, node index) for the stem and each cycle end."""
    rows = []
    for depth, node in enumerate([net.stem_end] + list(net.cycle_ends)):
        n_conv = sum(isinstance(layer, Conv) for layer in net.layers[:node])
        rows.append((depth, n_conv, node))
    return rows


def _draw(rng: SeededRng, shape) -> tuple[int, ...]:
    return tuple(int(rng.integers(0, s)) for s in shape)


def rf_depth_profile(net: Network, images, samples_per_depth: int = 100, seed: int = 0,
                     n_images: int = 10, max_retries: int = 20) -> list[ProfileRow]:
    """Mean/std normalized saliency RF size at the stem output and every cycle output.

    ``n_images`` images are drawn without replacement and share the samples
    evenly; activations are uniform over each node's (x, y, z) coordinates. A
    degenerate activation is redrawn on the same image up to ``max_retries``
    times before it is recorded as missing.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[..., None]
    if len(images) == 0:
        raise InvalidArgument("need at least one image")
    if samples_per_depth < 1:
        raise InvalidArgument("samples_per_depth must be >= 1")
    resolution = images.shape[1]
    rows = []
    for depth, n_conv, node in profile_nodes(net):
        rng = SeededRng(seed, 0x5A1, depth)
        m = min(n_images, len(images), samples_per_depth)
        chosen = rng.choice(len(images), size=m, replace=False)
        per = [samples_per_depth // m + (i < samples_per_depth % m) for i in range(m)]
        shape = net.node_shape(node)
        sizes = []
        for img_idx, count in zip(chosen, per):
            coords = [_draw(rng, shape) for _ in range(count)]
            maps = saliency_maps(net, node, coords, images[img_idx])
            for sal in maps:
                tries = 0
                while sal is None and tries < max_retries:
                    tries += 1
                    (sal,) = saliency_maps(net, node, [_draw(rng, shape)], images[img_idx])
                if sal is not None:
                    sizes.append(rf_stats(sal, resolution).normalized_size)
        arr = np.asarray(sizes)
        mean = float(arr.mean()) if len(arr) else float("nan")
        std = float(arr.std()) if len(arr) else float("nan")
        rows.append(ProfileRow(depth, n_conv, mean, std, len(arr), sizes))
    return rows


def format_profile(rows: list[ProfileRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PROFILE_FIELDS)
    for r in rows:
        writer.writerow([r.depth, r.layers, repr(r.mean_norm_rf), repr(r.std_norm_rf), r.n_samples])
    return buf.getvalue()
