"""CYCK checkpoint files.

Layout (little endian): ``b"CYCK"``, u32 version, u32 byte length + UTF-8 header
text, then one record per tensor: u32 name length + UTF-8 name, u32 rank, rank x
u32 extents, raw float64 data. The header holds the network spec lines followed
by ``meta.* = <json>`` lines; ``meta.records`` is the record count, so a file cut
at any point is detected.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import parse_config
from .network import Network, NetworkSpec, build_network
from .optim import OptimizerState

MAGIC = b"CYCK"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


class SpecMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    network: Network
    optimizer: OptimizerState | None = None
    epoch: int = 0
    seed: int = 0
    rng_state: dict | None = None
    history: list[list[float]] = field(default_factory=list)


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f8")
    head = _U32.pack(len(nb)) + nb + _U32.pack(arr.ndim) + b"".join(_U32.pack(s) for s in arr.shape)
    return head + np.ascontiguousarray(arr).tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    net = ckpt.network
    tensors: dict[str, np.ndarray] = {}
    tensors.update({f"param/{k}": v for k, v in net.named_params().items()})
    tensors.update({f"buffer/{k}": v for k, v in net.buffers().items()})
    opt = ckpt.optimizer
    if opt is not None:
        tensors.update({f"opt/{k}": v for k, v in sorted(opt.buffers.items())})
    meta = {
        "dtype": np.dtype(net.dtype).name,
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
        "optimizer": None if opt is None else {"kind": opt.kind, "lr": opt.lr, "hyper": opt.hyper, "t": opt.t},
        "spec_digest": net.spec.digest(),
        "records": len(tensors),
    }
    text = net.spec.to_text() + "".join(f"meta.{k} = {json.dumps(v, sort_keys=True)}\n" for k, v in meta.items())
    tb = text.encode("utf-8")
    chunks = [MAGIC, _U32.pack(VERSION), _U32.pack(len(tb)), tb]
    chunks += [_pack_tensor(name, arr) for name, arr in tensors.items()]
    path = Path(path)
    try:
        path.write_bytes(b"".join(chunks))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror or exc}") from exc


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint (needed {n} bytes at offset {self.pos})")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def load_checkpoint(path, spec: NetworkSpec | None = None) -> Checkpoint:
    """Parse a checkpoint fully before building anything.

    If ``spec`` is given, the stored network spec must hash identically.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a CYCK checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    try:
        text = r.take(r.u32()).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header text") from exc
    entries = parse_config(text)
    meta = {k[5:]: json.loads(v) for k, v in entries.items() if k.startswith("meta.")}
    stored = NetworkSpec.from_mapping({k: v for k, v in entries.items() if not k.startswith("meta.")})
    if "records" not in meta:
        raise CheckpointError(f"{path}: header lacks a record count")
    tensors = {}
    for _ in range(int(meta["records"])):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).copy()
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes after the last record")
    if spec is not None and spec.digest() != stored.digest():
        raise SpecMismatch(f"{path}: checkpoint was saved for a different network spec")

    dtype = np.dtype(meta.get("dtype", "float64")).type
    net = build_network(stored, seed=None, dtype=dtype)
    params = net.named_params()
    for name, arr in params.items():
        src = tensors.get(f"param/{name}")
        if src is None or src.shape != arr.shape:
            raise CheckpointError(f"{path}: parameter {name} missing or misshapen")
        arr[...] = src.astype(dtype)
    try:
        net.set_buffers({k[len("buffer/"):]: v for k, v in tensors.items() if k.startswith("buffer/")})
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing running statistics {exc}") from None
    opt = None
    if meta.get("optimizer"):
        o = meta["optimizer"]
        opt = OptimizerState(o["kind"], o["lr"], o["hyper"], t=o["t"])
        opt.buffers = {k[4:]: v.astype(dtype) for k, v in tensors.items() if k.startswith("opt/")}
    return Checkpoint(net, opt, int(meta.get("epoch", 0)), int(meta.get("seed", 0)),
                      meta.get("rng_state"), meta.get("history") or [])
