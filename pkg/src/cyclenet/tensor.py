"""Dense tensor helpers: axis permutation, zero padding, tri-linear resizing, seeded RNG.

Tensors are plain numpy arrays in row-major (C) order. Activation tensors use the
axis convention ``(x, y, z)`` = (horizontal, vertical, feature), optionally with a
leading batch axis.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


class InvalidArgument(ValueError):
    """Raised when an operation receives arguments outside its contract."""


def as_tensor(data, shape: Sequence[int] | None = None, dtype=np.float64) -> np.ndarray:
    """Build a row-major tensor from a flat or nested sequence."""
    arr = np.array(data, dtype=dtype, order="C")
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise InvalidArgument(f"extents must be positive, got {shape}")
        if arr.size != int(np.prod(shape)):
            raise InvalidArgument(f"{arr.size} values do not fill shape {shape}")
        arr = arr.reshape(shape)
    if arr.ndim > 4:
        raise InvalidArgument(f"tensors have at most 4 axes, got {arr.ndim}")
    return arr


def check_permutation(perm: Sequence[int], rank: int | None = None) -> tuple[int, ...]:
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(len(perm))):
        raise InvalidArgument(f"{perm} is not a permutation")
    if rank is not None and len(perm) != rank:
        raise InvalidArgument(f"permutation of length {len(perm)} applied to rank-{rank} tensor")
    return perm


def inverse_permutation(perm: Sequence[int]) -> tuple[int, ...]:
    perm = check_permutation(perm)
    inv = [0] * len(perm)
    for i, p in enumerate(perm):
        inv[p] = i
    return tuple(inv)


def compose_permutations(p: Sequence[int], q: Sequence[int]) -> tuple[int, ...]:
    """Return the permutation equivalent to applying ``p`` first, then ``q``."""
    p = check_permutation(p)
    q = check_permutation(q, len(p))
    return tuple(p[i] for i in q)


def permute_axes(t: np.ndarray, perm: Sequence[int]) -> np.ndarray:
    """Out axis ``i`` is input axis ``perm[i]``. Returns a fresh contiguous array."""
    perm = check_permutation(perm, np.ndim(t))
    return np.ascontiguousarray(np.transpose(t, perm))


def zero_pad(t: np.ndarray, pads: Sequence[tuple[int, int]]) -> np.ndarray:
    if len(pads) != np.ndim(t):
        raise InvalidArgument(f"{len(pads)} pad pairs for rank-{np.ndim(t)} tensor")
    pads = [(int(a), int(b)) for a, b in pads]
    if any(a < 0 or b < 0 for a, b in pads):
        raise InvalidArgument(f"pads must be nonnegative, got {pads}")
    return np.pad(t, pads, mode="constant", constant_values=0)


def center_crop(t: np.ndarray, pads: Sequence[tuple[int, int]]) -> np.ndarray:
    """Undo :func:`zero_pad` with the same pads."""
    index = tuple(slice(a, t.shape[i] - b) for i, (a, b) in enumerate(pads))
    return t[index].copy()


def interpolation_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights, shape (n_out, n_in), align-corners convention.

    Target index ``i`` samples source coordinate ``i * (n_in - 1) / (n_out - 1)``;
    for ``n_out == 1`` the source coordinate is 0.
    """
    if n_in < 1 or n_out < 1:
        raise InvalidArgument(f"extents must be positive, got {n_in} -> {n_out}")
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    for i in range(n_out):
        num = i * (n_in - 1)
        lo, rem = divmod(num, n_out - 1)
        frac = rem / (n_out - 1)
        m[i, lo] += 1.0 - frac
        if rem:
            m[i, lo + 1] += frac
    return m


def trilinear_resize(t: np.ndarray, new_shape: Sequence[int]) -> np.ndarray:
    """Separable linear resize of the last three axes (leading batch axis allowed)."""
    if np.ndim(t) not in (3, 4):
        raise InvalidArgument(f"expected a 3-axis tensor (plus optional batch), got rank {np.ndim(t)}")
    new_shape = tuple(int(s) for s in new_shape)
    if len(new_shape) != 3 or any(s < 1 for s in new_shape):
        raise InvalidArgument(f"invalid target shape {new_shape}")
    old = t.shape[-3:]
    if old == new_shape:
        return np.array(t, copy=True)
    mx, my, mz = (interpolation_matrix(a, b, dtype=t.dtype) for a, b in zip(old, new_shape))
    return np.einsum("...abc,ia,jb,kc->...ijk", t, mx, my, mz, optimize=True)


class SeededRng:
    """Counter-based (Philox) generator; same seed yields the same stream.

    ``spawn(i)`` derives an independent child stream keyed by ``(seed, i)``, which
    is how per-sample and per-epoch streams are obtained.
    """

    def __init__(self, seed: int, *key: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence([self.seed, *self.key])
        self.generator = np.random.Generator(np.random.Philox(ss))

    def spawn(self, *key: int) -> "SeededRng":
        return SeededRng(self.seed, *self.key, *key)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.generator.choice(a, size=size, replace=replace)

    def get_state(self) -> dict:
        return self.generator.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.generator.bit_generator.state = state
