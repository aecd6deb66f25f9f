"""Pathfinder-style contour-integration images and the PFDS dataset container.

Each image holds two target paths and ``distractor_factor * 2`` distractor paths,
all drawn as dashed antialiased strokes on black. Two disks mark either both ends
of one target path (connected, label 1) or one end of each target path
(disconnected, label 0).

Images are stored as ``(W, H)`` arrays indexed ``[x, y]`` so they feed a network
directly; PFDS files hold them row by row (``y`` outer, ``x`` inner).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tensor import SeededRng

MAGIC = b"PFDS"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class GenerationError(RuntimeError):
    """Path placement failed within the retry budget; reseed and try again."""


class PFDSFormatError(ValueError):
    pass


@dataclass
class GenConfig:
    width: int = 128
    path_length: int = 6
    distractor_factor: int = 5
    n_paths: int = 2
    dash_length: float | None = None
    dash_gap: float | None = None
    curvature_max: float = 0.6
    circle_radius: float | None = None
    stroke_width: float | None = None
    circle_sep_min: float = 0.0
    circle_sep_max: float = math.inf
    max_retries: int = 512
    seed: int = 0

    def __post_init__(self):
        scale = self.width / 128.0
        if self.dash_length is None:
            self.dash_length = 5.0 * scale
        if self.dash_gap is None:
            self.dash_gap = 3.0 * scale
        if self.circle_radius is None:
            self.circle_radius = 3.0 * scale
        if self.stroke_width is None:
            self.stroke_width = max(1.0, 1.5 * scale)
        self.validate()

    @property
    def step(self) -> float:
        return self.dash_length + self.dash_gap

    @property
    def margin(self) -> float:
        return self.circle_radius + 1.0

    @property
    def separation(self) -> float:
        """Minimum center-line distance between strokes of different paths."""
        return 2.0 * self.dash_gap + self.stroke_width

    @property
    def clear_radius(self) -> float:
        """Distance distractors keep from circle centers."""
        return 2.0 * self.circle_radius + 0.5 * self.stroke_width

    def validate(self):
        if self.width < 16:
            raise ValueError(f"width must be >= 16, got {self.width}")
        if self.path_length < 2:
            raise ValueError(f"path_length must be >= 2, got {self.path_length}")
        if self.distractor_factor < 0:
            raise ValueError("distractor_factor must be >= 0")
        if self.n_paths != 2:
            raise ValueError("exactly two target paths are supported")
        if min(self.dash_length, self.dash_gap, self.circle_radius, self.stroke_width) <= 0:
            raise ValueError("dash_length, dash_gap, circle_radius and stroke_width must be positive")
        if self.curvature_max < 0:
            raise ValueError("curvature_max must be >= 0")
        span = (self.path_length - 1) * self.step + self.dash_length
        if span > self.width - 2 * self.margin:
            raise ValueError(f"a straight path of {span:.1f}px cannot fit in a {self.width}px frame")

    @classmethod
    def from_mapping(cls, cfg: dict[str, str]) -> "GenConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in cfg:
                raw = cfg[f.name]
                kind = int if f.name in ("width", "path_length", "distractor_factor", "n_paths",
                                         "max_retries", "seed") else float
                kwargs[f.name] = kind(raw)
        return cls(**kwargs)


@dataclass
class Path2D:
    """Dash centers spaced ``step`` apart plus per-dash unit tangents."""

    centers: np.ndarray
    tangents: np.ndarray
    dash_length: float

    @property
    def segments(self) -> np.ndarray:
        half = 0.5 * self.dash_length * self.tangents
        return np.stack([self.centers - half, self.centers + half], axis=1)

    @property
    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        seg = self.segments
        return seg[0, 0], seg[-1, 1]

    def sample_points(self, per_dash: int = 5) -> np.ndarray:
        return _points(self.centers, self.tangents, self.dash_length, per_dash)


@dataclass
class PathfinderSample:
    image: np.ndarray
    label: int
    metadata: dict = field(default_factory=dict)


def _walks(cfg: GenConfig, rng: SeededRng, m: int, start=None) -> tuple[np.ndarray, np.ndarray]:
    """``m`` candidate random walks: dash centers and unit tangents, each (m, n, 2)."""
    n = cfg.path_length
    lo, hi = cfg.margin, cfg.width - cfg.margin
    if start is None:
        start = rng.uniform(lo, hi, size=(m, 2))
    heading = rng.uniform(0.0, 2 * math.pi, size=(m, 1))
    turns = rng.uniform(-cfg.curvature_max, cfg.curvature_max, size=(m, n - 1))
    headings = heading + np.concatenate([np.zeros((m, 1)), np.cumsum(turns, axis=1)], axis=1)[:, : n - 1]
    steps = cfg.step * np.stack([np.cos(headings), np.sin(headings)], axis=-1)
    centers = np.concatenate([start[:, None], start[:, None] + np.cumsum(steps, axis=1)], axis=1)
    diffs = np.empty_like(centers)
    diffs[:, 0] = centers[:, 1] - centers[:, 0]
    diffs[:, -1] = centers[:, -1] - centers[:, -2]
    diffs[:, 1:-1] = centers[:, 2:] - centers[:, :-2]
    tangents = diffs / np.linalg.norm(diffs, axis=-1, keepdims=True)
    return centers, tangents


def _points(centers, tangents, dash_length, per_dash: int = 5) -> np.ndarray:
    t = np.linspace(-0.5, 0.5, per_dash) * dash_length
    pts = centers[..., None, :] + t[:, None] * tangents[..., None, :]
    return pts.reshape(*centers.shape[:-2], -1, 2)


class _Forbidden:
    """Boolean grid of positions too close to already placed geometry.

    A cell is marked when its center lies within ``radius + h / sqrt(2)`` of a
    blocked point, so looking up the nearest cell never lets a point closer than
    ``radius`` through.
    """

    def __init__(self, width: float, h: float = 0.5):
        self.h = h
        self.n = int(math.ceil(width / h)) + 1
        self.grid = np.zeros((self.n, self.n), dtype=bool)

    def block(self, points: np.ndarray, radius: float) -> None:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if not len(pts):
            return
        r = radius + self.h / math.sqrt(2.0)
        lo = np.clip(np.floor((pts.min(axis=0) - r) / self.h).astype(int), 0, self.n - 1)
        hi = np.clip(np.ceil((pts.max(axis=0) + r) / self.h).astype(int), 0, self.n - 1)
        gx = np.arange(lo[0], hi[0] + 1) * self.h
        gy = np.arange(lo[1], hi[1] + 1) * self.h
        dx = (gx[:, None] - pts[:, 0]) ** 2
        dy = (gy[:, None] - pts[:, 1]) ** 2
        near = ((dx[:, None, :] + dy[None, :, :]) < r * r).any(axis=-1)
        self.grid[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1] |= near

    def free_starts(self, rng: SeededRng, m: int, lo: float, hi: float):
        """``m`` points drawn uniformly from unblocked cells inside [lo, hi]^2, or None."""
        a, b = int(math.ceil(lo / self.h)), int(math.floor(hi / self.h))
        free = np.argwhere(~self.grid[a:b + 1, a:b + 1]) + a
        if not len(free):
            return None
        pick = free[rng.integers(0, len(free), size=m)]
        jitter = rng.uniform(-0.5 * self.h, 0.5 * self.h, size=(m, 2))
        return np.clip(pick * self.h + jitter, lo, hi)

    def hits(self, pts: np.ndarray) -> np.ndarray:
        """Per candidate (m, P, 2): True if any point falls on a blocked cell."""
        idx = np.clip(np.rint(pts / self.h).astype(int), 0, self.n - 1)
        return self.grid[idx[..., 0], idx[..., 1]].any(axis=-1)


def gen_path(cfg: GenConfig, rng: SeededRng, others: list[Path2D] = (), keep_clear: list[np.ndarray] = (),
             batch: int = 128, forbid: "_Forbidden | None" = None, accept=None) -> Path2D:
    """Random walk of ``cfg.path_length`` dashes placed clear of ``others``.

    Candidates leaving the margins or coming within ``cfg.separation`` of another
    path are rejected. ``keep_clear`` lists points (circle centers) the new path
    must stay ``2 * circle_radius`` plus half a stroke away from. ``accept`` is an
    optional filter mapping candidate segments (m, n, 2, 2) to a boolean (m,) mask.
    """
    if forbid is None:
        forbid = _Forbidden(cfg.width)
        for p in others:
            forbid.block(p.sample_points(), cfg.separation)
        forbid.block(np.array(keep_clear, dtype=float), cfg.clear_radius)
    lo, hi = cfg.margin, cfg.width - cfg.margin
    tried = 0
    while tried < cfg.max_retries:
        m = min(batch, cfg.max_retries - tried)
        tried += m
        start = forbid.free_starts(rng, m, lo, hi)
        if start is None:
            break
        centers, tangents = _walks(cfg, rng, m, start)
        pts = _points(centers, tangents, cfg.dash_length)
        ok = np.all((pts >= lo) & (pts <= hi), axis=(1, 2)) & ~forbid.hits(pts)
        if accept is not None:
            half = 0.5 * cfg.dash_length * tangents
            ok &= accept(np.stack([centers - half, centers + half], axis=2))
        idx = np.flatnonzero(ok)
        if len(idx):
            i = idx[0]
            return Path2D(centers[i].copy(), tangents[i].copy(), cfg.dash_length)
    raise GenerationError(f"could not place a path within {cfg.max_retries} attempts")


def _segment_distance(points: np.ndarray, seg: np.ndarray) -> np.ndarray:
    """Distance from each point (P, 2) to each segment (S, 2, 2): returns (S, P)."""
    a = seg[:, 0][:, None, :]
    ab = (seg[:, 1] - seg[:, 0])[:, None, :]
    ap = points[None, :, :] - a
    denom = np.maximum((ab * ab).sum(-1), 1e-12)
    t = np.clip((ap * ab).sum(-1) / denom, 0.0, 1.0)
    d = ap - t[..., None] * ab
    return np.sqrt((d * d).sum(-1))


def render(cfg: GenConfig, paths: list[Path2D], circles: list[np.ndarray], supersample: int = 2) -> np.ndarray:
    """Antialiased (W, W) image in [0, 1]: binary strokes at ``supersample``x, box-averaged."""
    w = cfg.width
    s = supersample
    coords = (np.arange(w * s) + 0.5) / s
    hi = np.zeros((w * s, w * s), dtype=bool)
    half = 0.5 * cfg.stroke_width
    segs = np.concatenate([p.segments for p in paths]) if paths else np.zeros((0, 2, 2))
    # each stroke only touches the subsamples inside its padded bounding box
    for seg in segs:
        i0, j0 = np.clip(np.floor((seg.min(axis=0) - half) * s).astype(int), 0, w * s)
        i1, j1 = np.clip(np.ceil((seg.max(axis=0) + half) * s).astype(int) + 1, 0, w * s)
        gx, gy = np.meshgrid(coords[i0:i1], coords[j0:j1], indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        near = _segment_distance(pts, seg[None])[0] <= half
        hi[i0:i1, j0:j1] |= near.reshape(gx.shape)
    gx, gy = np.meshgrid(coords, coords, indexing="ij")
    for c in circles:
        hi |= (gx - c[0]) ** 2 + (gy - c[1]) ** 2 <= cfg.circle_radius ** 2
    img = hi.astype(np.float64)
    return img.reshape(w, s, w, s).mean(axis=(1, 3))


def gen_sample(cfg: GenConfig, label: int, rng: SeededRng) -> PathfinderSample:
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    def in_band(p, q):
        d = np.linalg.norm(p - q, axis=-1)
        return (d >= cfg.circle_sep_min) & (d <= cfg.circle_sep_max)

    # the band is a candidate filter on the path that decides the circle distance
    try:
        if label == 1:
            a = gen_path(cfg, rng, accept=lambda seg: in_band(seg[:, 0, 0], seg[:, -1, 1]))
            circles = list(a.endpoints)
            b = gen_path(cfg, rng, [a])
        else:
            a = gen_path(cfg, rng)
            first = a.endpoints[int(rng.integers(0, 2))]
            end = int(rng.integers(0, 2))
            b = gen_path(cfg, rng, [a], accept=lambda seg: in_band(first, seg[:, -end, end]))
            circles = [first, b.endpoints[end]]
    except GenerationError:
        circles = None
    if circles is None:
        raise GenerationError("circle separation band could not be met")
    paths = [a, b]
    forbid = _Forbidden(cfg.width)
    forbid.block(np.array(circles), cfg.clear_radius)
    for p in paths:
        forbid.block(p.sample_points(), cfg.separation)
    for _ in range(cfg.distractor_factor * cfg.n_paths):
        paths.append(gen_path(cfg, rng, forbid=forbid))
        forbid.block(paths[-1].sample_points(), cfg.separation)
    image = render(cfg, paths, circles)
    meta = {
        "circles": [tuple(map(float, c)) for c in circles],
        "targets": [tuple(map(float, np.concatenate(p.endpoints))) for p in (a, b)],
        "n_paths": len(paths),
        "paths": paths,
    }
    return PathfinderSample(image, label, meta)


def raster_connected(image: np.ndarray, circles, cfg: GenConfig, threshold: float = 0.25) -> bool:
    """Whether the two circles fall in one 8-connected blob of the thresholded image.

    Strokes are dilated by ``max(1, dash_gap / 2)`` pixels first so that dashes of
    one path merge while separate paths stay apart.
    """
    r = max(1.0, 0.5 * cfg.dash_gap)
    g = np.arange(-int(math.ceil(r)), int(math.ceil(r)) + 1)
    disk = g[:, None] ** 2 + g[None, :] ** 2 <= r * r
    mask = ndimage.binary_dilation(image > threshold, structure=disk)
    lab, _ = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    w = image.shape[0]
    ids = [lab[min(int(c[0]), w - 1), min(int(c[1]), w - 1)] for c in circles]
    return bool(ids[0]) and ids[0] == ids[1]


def sample_seed_rng(cfg: GenConfig, split: int, index: int, attempt: int = 0) -> SeededRng:
    return SeededRng(cfg.seed, split, index, attempt)


def generate(cfg: GenConfig, count: int, split: int = 0, max_reseeds: int = 50) -> list[PathfinderSample]:
    """``count`` samples with alternating labels, even indices connected.

    Samples whose raster connectivity contradicts the label are discarded and
    regenerated from the next seed attempt.
    """
    out = []
    for i in range(count):
        label = 1 - i % 2
        for attempt in range(max_reseeds):
            try:
                sample = gen_sample(cfg, label, sample_seed_rng(cfg, split, i, attempt))
            except GenerationError:
                continue
            if raster_connected(sample.image, sample.metadata["circles"], cfg) != bool(label):
                continue
            sample.metadata.update(seed=cfg.seed, split=split, index=i, attempt=attempt)
            out.append(sample)
            break
        else:
            raise GenerationError(f"sample {i} of split {split} failed after {max_reseeds} reseeds")
    return out


# ---------------------------------------------------------------------- PFDS


def to_bytes(image: np.ndarray) -> bytes:
    q = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(q.T).tobytes()


def write_pfds(path, images, labels) -> None:
    images = list(images)
    labels = [int(v) for v in labels]
    if len(images) != len(labels):
        raise ValueError("images and labels differ in length")
    if not images:
        width = height = 0
    else:
        width, height = images[0].shape
    chunks = [_HEADER.pack(MAGIC, VERSION, len(images), width, height)]
    for img, lab in zip(images, labels):
        if img.shape != (width, height):
            raise ValueError(f"image shape {img.shape} differs from {(width, height)}")
        if lab not in (0, 1):
            raise ValueError(f"label {lab} is not binary")
        chunks.append(bytes([lab]))
        chunks.append(to_bytes(img))
    path = Path(path)
    try:
        path.write_bytes(b"".join(chunks))
    except OSError as exc:
        raise OSError(f"cannot write PFDS file {path}: {exc.strerror or exc}") from exc


def read_pfds(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(images, labels)``: float images in [0, 1] of shape (N, W, H) and uint8 labels."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read PFDS file {path}: {exc.strerror or exc}") from exc
    if len(raw) < _HEADER.size:
        raise PFDSFormatError(f"{path}: file too short for a PFDS header")
    magic, version, count, width, height = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise PFDSFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise PFDSFormatError(f"{path}: unsupported PFDS version {version}")
    rec = 1 + width * height
    if len(raw) != _HEADER.size + count * rec:
        raise PFDSFormatError(f"{path}: expected {count} records of {rec} bytes, file size is {len(raw)}")
    body = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).reshape(count, rec)
    labels = body[:, 0].copy()
    if np.any(labels > 1):
        raise PFDSFormatError(f"{path}: non-binary label")
    images = body[:, 1:].reshape(count, height, width).transpose(0, 2, 1).astype(np.float64) / 255.0
    return np.ascontiguousarray(images), labels


def gen_dataset(cfg: GenConfig, n_train: int, n_test: int, out_path) -> tuple[Path, Path]:
    """Write ``<stem>.train.pfds`` and ``<stem>.test.pfds``; returns both paths.

    Train and test use disjoint seed streams; both splits are class-balanced.
    """
    if n_train <= 0 or n_test <= 0:
        raise ValueError("sample counts must be positive")
    if n_train % 2 or n_test % 2:
        raise ValueError("sample counts must be even to keep classes balanced")
    out = Path(out_path)
    stem = out.with_suffix("") if out.suffix == ".pfds" else out
    written = []
    for split, count, tag in ((0, n_train, "train"), (1, n_test, "test")):
        samples = generate(cfg, count, split)
        target = stem.parent / f"{stem.name}.{tag}.pfds"
        write_pfds(target, [s.image for s in samples], [s.label for s in samples])
        written.append(target)
    return written[0], written[1]


def with_overrides(cfg: GenConfig, **kw) -> GenConfig:
    return replace(cfg, **kw)
