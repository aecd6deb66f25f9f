"""Differentiable primitives on batched activation tensors of shape (B, X, Y, Z).

Each op accepts plain numpy arrays (pure forward evaluation) or :class:`Var`
nodes (forward evaluation recorded on their tape). Convolution kernels have shape
``(k, k, c_out, c_in)``; displacements along each local axis run from
``-(k // 2)`` to ``k - 1 - k // 2``.
"""

from __future__ import annotations

import threading
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .autodiff import Tape, Var
from .tensor import InvalidArgument, interpolation_matrix

PLANES = ("xy", "xz", "yz")

# batched permutation bringing the convolved plane to axes (1, 2) and the fully
# connected axis last; local kernel axes are (dx, dy), (dx, dz), (dy, dz)
_PLANE_PERM = {"xy": (0, 1, 2, 3), "xz": (0, 1, 3, 2), "yz": (0, 2, 3, 1)}
_PLANE_INV = {"xy": (0, 1, 2, 3), "xz": (0, 1, 3, 2), "yz": (0, 3, 1, 2)}


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _val(a):
    return a.value if isinstance(a, Var) else a


def _lift(tape: Tape, a) -> Var | None:
    if a is None or isinstance(a, Var):
        return a
    return tape.leaf(a)


def _record(tape, value, parents, backward):
    if tape is None:
        return value
    parents = [_lift(tape, p) for p in parents]
    keep = [p for p in parents if p is not None]
    mask = [p is not None for p in parents]

    def fn(g):
        out = backward(g)
        return [o for o, m in zip(out, mask) if m]

    return tape.record(value, keep, fn)


# ----------------------------------------------------------------- convolution


def same_pads(k: int) -> tuple[int, int]:
    return k // 2, k - 1 - k // 2


_scratch = threading.local()
_CHUNK_ROWS = 8192


def _workspace(n: int, dtype) -> np.ndarray:
    """Per-thread reusable patch buffer of at least ``n`` elements."""
    key = np.dtype(dtype).str
    bufs = getattr(_scratch, "bufs", None)
    if bufs is None:
        bufs = _scratch.bufs = {}
    buf = bufs.get(key)
    if buf is None or buf.size < n:
        buf = bufs[key] = np.empty(n, dtype=dtype)
    return buf[:n]


def _patches(xp: np.ndarray, k: int, xo: int, yo: int, b0: int, b1: int) -> np.ndarray:
    """im2col rows for samples ``b0:b1``, shape ((b1-b0) * xo * yo, k * k * C).

    For a fixed dx the (dy, c) part of a patch is one contiguous run of the
    padded input, so each dx is a single strided copy. The result lives in a
    scratch buffer that the next call overwrites.
    """
    c = xp.shape[-1]
    nb = b1 - b0
    cols = _workspace(nb * xo * yo * k * k * c, xp.dtype).reshape(nb, xo, yo, k, k * c)
    s = xp.strides
    for a in range(k):
        cols[:, :, :, a, :] = as_strided(xp[b0:b1, a:], shape=(nb, xo, yo, k * c), strides=s)
    return cols.reshape(nb * xo * yo, k * k * c)


def _correlate(xp: np.ndarray, kmat: np.ndarray, k: int) -> np.ndarray:
    """Valid correlation of padded (B, X, Y, C) input with a (k*k*C, C_out) kernel matrix."""
    xp = np.ascontiguousarray(xp)
    b, xx, yy, _ = xp.shape
    xo, yo = xx - k + 1, yy - k + 1
    out = np.empty((b * xo * yo, kmat.shape[1]), dtype=np.result_type(xp, kmat))
    step = max(1, _CHUNK_ROWS // (xo * yo))
    for b0 in range(0, b, step):
        b1 = min(b, b0 + step)
        np.matmul(_patches(xp, k, xo, yo, b0, b1), kmat, out=out[b0 * xo * yo:b1 * xo * yo])
    return out.reshape(b, xo, yo, -1)


def _kernel_grad(xp: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    """sum over patches of patch (x) g, shape (k*k*C, C_out)."""
    b, xo, yo, cout = g.shape
    gm = g.reshape(-1, cout)
    acc = np.zeros((k * k * xp.shape[-1], cout), dtype=np.result_type(xp, g))
    step = max(1, _CHUNK_ROWS // (xo * yo))
    for b0 in range(0, b, step):
        b1 = min(b, b0 + step)
        acc += _patches(xp, k, xo, yo, b0, b1).T @ gm[b0 * xo * yo:b1 * xo * yo]
    return acc


def _conv_xy_fwd(x: np.ndarray, w: np.ndarray, bias, pad: str):
    k, k2, cout, cin = w.shape
    if k != k2:
        raise InvalidArgument(f"kernel must be square over its local axes, got {w.shape}")
    if x.shape[-1] != cin:
        raise InvalidArgument(f"input has {x.shape[-1]} channels, kernel expects {cin}")
    if pad == "same":
        pads = same_pads(k)
    elif pad == "valid":
        pads = (0, 0)
    else:
        raise InvalidArgument(f"unknown padding {pad!r}")
    xp = np.pad(x, ((0, 0), pads, pads, (0, 0))) if pads != (0, 0) else np.ascontiguousarray(x)
    if xp.shape[1] < k or xp.shape[2] < k:
        raise InvalidArgument(f"kernel size {k} exceeds padded extent {xp.shape[1:3]}")
    kmat = w.transpose(0, 1, 3, 2).reshape(k * k * cin, cout)
    out = _correlate(xp, kmat, k)
    if bias is not None:
        out += bias
    return out, xp, pads


def _conv_xy_bwd(g, w, xp, pads, need_input_grad=True):
    k, _, cout, cin = w.shape
    g = np.ascontiguousarray(g)
    dw = _kernel_grad(xp, g, k).reshape(k, k, cin, cout).transpose(0, 1, 3, 2)
    db = g.reshape(-1, cout).sum(axis=0)
    if not need_input_grad:
        return None, dw, db
    # input gradient = correlation of g with the flipped, transposed kernel
    back = (k - 1 - pads[0], k - 1 - pads[1])
    gp = np.pad(g, ((0, 0), back, back, (0, 0)))
    dx = _correlate(gp, np.ascontiguousarray(w[::-1, ::-1]).reshape(k * k * cout, cin), k)
    return dx, dw, db


def conv2d(x, w, bias=None, plane: str = "xy", pad: str = "same", need_input_grad: bool = True):
    """Convolution over ``plane`` of a batched (B, X, Y, Z) tensor.

    ``plane="xy"`` convolves x, y with z fully connected, ``"xz"`` convolves x, z
    with y fully connected, ``"yz"`` convolves y, z with x fully connected. The
    orthogonal planes are an axis permutation wrapped around the xy case.
    """
    if plane not in _PLANE_PERM:
        raise InvalidArgument(f"unknown plane {plane!r}")
    tape = _tape_of(x, w, bias)
    xv, wv, bv = _val(x), _val(w), _val(bias)
    if xv.ndim != 4:
        raise InvalidArgument(f"conv2d expects a batched 4-axis tensor, got shape {xv.shape}")
    if plane != "xy" and pad != "same":
        raise InvalidArgument("orthogonal convolutions support 'same' padding only")
    perm, inv = _PLANE_PERM[plane], _PLANE_INV[plane]
    xt = np.ascontiguousarray(xv.transpose(perm)) if plane != "xy" else xv
    out, xp, pads = _conv_xy_fwd(xt, wv, bv, pad)
    if plane != "xy":
        out = np.ascontiguousarray(out.transpose(inv))
    if tape is None:
        return out

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(perm)) if plane != "xy" else g
        dx, dw, db = _conv_xy_bwd(gt, wv, xp, pads, need_input_grad)
        if dx is not None and plane != "xy":
            dx = np.ascontiguousarray(dx.transpose(inv))
        return dx, dw, (db if bias is not None else None)

    return _record(tape, out, [x, w, bias], backward)


def _batched(fn, x, *args, **kw):
    xv = _val(x)
    if isinstance(x, Var) or xv.ndim == 4:
        return fn(x, *args, **kw)
    return fn(np.asarray(xv)[None], *args, **kw)[0]


def conv2d_xy(x, kernel, bias=None, pad: str = "same"):
    """output(x,y,z) = sum_{dx,dy,z'} K(dx,dy,z,z') input(x+dx, y+dy, z')."""
    return _batched(conv2d, x, kernel, bias, plane="xy", pad=pad)


def conv2d_xz(x, kernel, bias=None):
    """output(x,y,z) = sum_{dx,y',dz} K(dx,dz,y,y') input(x+dx, y', z+dz)."""
    return _batched(conv2d, x, kernel, bias, plane="xz")


def conv2d_yz(x, kernel, bias=None):
    """output(x,y,z) = sum_{x',dy,dz} K(dy,dz,x,x') input(x', y+dy, z+dz)."""
    return _batched(conv2d, x, kernel, bias, plane="yz")


# ----------------------------------------------------------- pointwise & norm


def relu(x):
    tape = _tape_of(x)
    xv = _val(x)
    out = np.maximum(xv, 0)
    if tape is None:
        return out
    live = xv > 0
    return _record(tape, out, [x], lambda g: (g * live,))


def dropout(x, rate: float, train: bool, rng=None):
    if not 0.0 <= rate < 1.0:
        raise InvalidArgument(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    xv = _val(x)
    mask = (rng.random(xv.shape) >= rate).astype(xv.dtype) * xv.dtype.type(1.0 / (1.0 - rate))
    out = xv * mask
    tape = _tape_of(x)
    if tape is None:
        return out
    return _record(tape, out, [x], lambda g: (g * mask,))


def batch_norm_train(x, gamma, beta, eps: float):
    """Normalize with batch statistics over all axes but the last (feature) axis.

    Returns ``(out, batch_mean, batch_var)``; variance is biased (divides by N).
    """
    if eps <= 0:
        raise InvalidArgument(f"epsilon must be positive, got {eps}")
    tape = _tape_of(x, gamma, beta)
    xv, gv, bv = _val(x), _val(gamma), _val(beta)
    axes = tuple(range(xv.ndim - 1))
    n = xv.size // xv.shape[-1]
    mean = xv.mean(axis=axes)
    xc = xv - mean
    var = (xc * xc).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gv + bv
    if tape is None:
        return out, mean, var

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gv
        dx = (inv / n) * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        return dx, dgamma, dbeta

    return _record(tape, out, [x, gamma, beta], backward), mean, var


def batch_norm_eval(x, gamma, beta, running_mean, running_var, eps: float):
    if eps <= 0:
        raise InvalidArgument(f"epsilon must be positive, got {eps}")
    tape = _tape_of(x, gamma, beta)
    xv, gv, bv = _val(x), _val(gamma), _val(beta)
    axes = tuple(range(xv.ndim - 1))
    inv = (1.0 / np.sqrt(running_var + eps)).astype(xv.dtype)
    xhat = (xv - running_mean.astype(xv.dtype)) * inv
    out = xhat * gv + bv
    if tape is None:
        return out
    scale = gv * inv
    return _record(tape, out, [x, gamma, beta],
                   lambda g: (g * scale, (g * xhat).sum(axis=axes), g.sum(axis=axes)))


# ---------------------------------------------------------------------- shape


def resize(x, out_shape: Sequence[int]):
    """Align-corners tri-linear resize of the three trailing axes of (B, X, Y, Z)."""
    tape = _tape_of(x)
    xv = _val(x)
    old = xv.shape[1:]
    out_shape = tuple(int(s) for s in out_shape)
    if old == out_shape:
        return x
    mx, my, mz = (interpolation_matrix(a, b, dtype=xv.dtype) for a, b in zip(old, out_shape))
    out = np.einsum("nabc,ia,jb,kc->nijk", xv, mx, my, mz, optimize=True)
    if tape is None:
        return out
    return _record(tape, out, [x],
                   lambda g: (np.einsum("nijk,ia,jb,kc->nabc", g, mx, my, mz, optimize=True),))


def global_pool(x):
    """Mean over the spatial axes: (B, X, Y, Z) -> (B, Z)."""
    tape = _tape_of(x)
    xv = _val(x)
    out = xv.mean(axis=(1, 2))
    if tape is None:
        return out
    b, xx, yy, z = xv.shape
    scale = xv.dtype.type(1.0 / (xx * yy))
    return _record(tape, out, [x],
                   lambda g: (np.broadcast_to((g * scale)[:, None, None, :], xv.shape).copy(),))


def flatten(x):
    tape = _tape_of(x)
    xv = _val(x)
    out = xv.reshape(xv.shape[0], -1)
    if tape is None:
        return out
    return _record(tape, out, [x], lambda g: (g.reshape(xv.shape),))


def dense(x, w, b=None):
    """(B, n_in) @ W.T + b with W of shape (n_out, n_in)."""
    tape = _tape_of(x, w, b)
    xv, wv, bv = _val(x), _val(w), _val(b)
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[1]:
        raise InvalidArgument(f"dense weight {wv.shape} incompatible with input {xv.shape}")
    out = xv @ wv.T
    if bv is not None:
        out = out + bv
    if tape is None:
        return out

    def backward(g):
        return g @ wv, g.T @ xv, (g.sum(axis=0) if b is not None else None)

    return _record(tape, out, [x, w, b], backward)


def total(x):
    """Sum of all entries as a 0-d tensor."""
    tape = _tape_of(x)
    xv = _val(x)
    out = np.asarray(xv.sum())
    if tape is None:
        return out
    return _record(tape, out, [x], lambda g: (np.full_like(xv, g),))


def inner(x, c):
    """sum(x * c) for a constant array ``c`` of the same shape, as a 0-d tensor."""
    tape = _tape_of(x)
    xv = _val(x)
    c = np.asarray(c, dtype=xv.dtype)
    if c.shape != xv.shape:
        raise InvalidArgument(f"weight shape {c.shape} != tensor shape {xv.shape}")
    out = np.asarray((xv * c).sum())
    if tape is None:
        return out
    return _record(tape, out, [x], lambda g: (g * c,))


# ----------------------------------------------------------------------- loss


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy_l2(logits, labels, params: Sequence = (), lam: float = 0.0):
    """Mean cross-entropy over the batch plus ``lam * sum(p**2)`` over ``params``.

    ``logits`` is (B, C) or a single (C,) vector; ``labels`` is an int or (B,) ints.
    """
    if lam < 0:
        raise InvalidArgument(f"L2 lambda must be nonnegative, got {lam}")
    tape = _tape_of(logits, *params)
    lv = _val(logits)
    single = lv.ndim == 1
    lv2 = lv[None] if single else lv
    labels = np.atleast_1d(np.asarray(labels))
    n_classes = lv2.shape[1]
    if labels.shape != (lv2.shape[0],) or not np.issubdtype(labels.dtype, np.integer):
        raise InvalidArgument(f"labels {labels!r} do not match logits of shape {lv.shape}")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise InvalidArgument(f"label out of range for {n_classes} classes")
    logp = log_softmax(lv2)
    bsz = lv2.shape[0]
    ce = -logp[np.arange(bsz), labels].mean()
    pvals = [_val(p) for p in params]
    reg = sum(float((p.astype(np.float64) ** 2).sum()) for p in pvals) if pvals else 0.0
    loss = np.asarray(ce + lam * reg, dtype=lv.dtype)
    if tape is None:
        return loss

    def backward(g):
        probs = np.exp(logp)
        probs[np.arange(bsz), labels] -= 1.0
        dlogits = probs * (g / bsz)
        if single:
            dlogits = dlogits[0]
        return [dlogits.astype(lv.dtype)] + [(2.0 * lam * g) * p for p in pvals]

    return _record(tape, loss, [logits, *params], backward)
