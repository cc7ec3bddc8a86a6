"""Synthetic photo / CAD / sketch shape datasets, the DMDS file format and splits.

All randomness comes from splitmix64 streams so that a (domain, classes, n,
image_size, seed) tuple always renders the same bytes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SHAPES = ("circle", "square", "triangle", "cross", "ring", "star", "L", "T")
DOMAINS = ("photo", "cad", "sketch")
IMAGE_SIZES = (16, 32, 64)

GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
_U64 = np.uint64


class ParameterError(ValueError):
    """Invalid generation or split arguments."""


class SplitError(ValueError):
    """A class is too small to split."""


class VocabularyMismatchError(ValueError):
    """Source and target datasets disagree on class names."""


class DatasetFormatError(ValueError):
    """Malformed DMDS file."""


class BadMagicError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


# ---------------------------------------------------------------- splitmix64


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _U64(30))) * _U64(MIX1)
        z = (z ^ (z >> _U64(27))) * _U64(MIX2)
        return z ^ (z >> _U64(31))


class SplitMix64:
    """splitmix64: state += 0x9E3779B97F4A7C15, output = mix(state).

    ``mix`` is the standard finaliser (xor-shift 30, ×0xBF58476D1CE4E5B9,
    xor-shift 27, ×0x94D049BB133111EB, xor-shift 31). Draws are generated in
    vectorised blocks but are identical to calling ``next_u64`` repeatedly.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & 0xFFFFFFFFFFFFFFFF

    @classmethod
    def derive(cls, *keys: int) -> SplitMix64:
        """Stream keyed by a tuple of integers: state ← mix(state + (k+1)·GOLDEN) per key."""
        state = 0
        for k in keys:
            state = int(_mix(np.array([(state + (int(k) + 1) * GOLDEN) & 0xFFFFFFFFFFFFFFFF], dtype=_U64))[0])
        return cls(state)

    def next_u64(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=_U64) * _U64(GOLDEN) + _U64(self.state)
        self.state = (self.state + n * GOLDEN) & 0xFFFFFFFFFFFFFFFF
        return _mix(steps)

    def random(self, n: int | tuple = 1) -> np.ndarray:
        """Floats in [0, 1) from the top 53 bits."""
        shape = (n,) if isinstance(n, int) else n
        count = int(np.prod(shape))
        return ((self.next_u64(count) >> _U64(11)).astype(np.float64) * 2.0**-53).reshape(shape)

    def uniform(self, lo: float, hi: float, n: int | tuple = 1) -> np.ndarray:
        return lo + (hi - lo) * self.random(n)

    def normal(self, n: int | tuple = 1) -> np.ndarray:
        """Box-Muller from pairs of uniforms (one normal per pair)."""
        shape = (n,) if isinstance(n, int) else n
        count = int(np.prod(shape))
        u = self.random(2 * count)
        u1, u2 = 1.0 - u[:count], u[count:]
        return (np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)).reshape(shape)

    def integers(self, lo: int, hi: int) -> int:
        return lo + int(self.random(1)[0] * (hi - lo))

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.random(n), kind="stable")


# ---------------------------------------------------------------- geometry


def _regular(n: int, r: float, phase: float = 0.0) -> np.ndarray:
    a = phase + 2 * np.pi * np.arange(n) / n
    return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)


def _contours(shape: str) -> list[np.ndarray]:
    """Closed contours of a shape in unit coordinates (radius about 1)."""
    if shape == "circle":
        return [_regular(48, 1.0)]
    if shape == "square":
        return [np.array([[-0.8, -0.8], [0.8, -0.8], [0.8, 0.8], [-0.8, 0.8]])]
    if shape == "triangle":
        return [_regular(3, 1.0, np.pi / 2)]
    if shape == "cross":
        a, b = 0.3, 1.0
        return [np.array([[-a, -b], [a, -b], [a, -a], [b, -a], [b, a], [a, a], [a, b], [-a, b], [-a, a], [-b, a], [-b, -a], [-a, -a]])]
    if shape == "ring":
        return [_regular(48, 1.0), _regular(48, 0.55)[::-1]]
    if shape == "star":
        outer = _regular(5, 1.0, np.pi / 2)
        inner = _regular(5, 0.42, np.pi / 2 + np.pi / 5)
        return [np.stack([outer, inner], axis=1).reshape(10, 2)]
    if shape == "L":
        return [np.array([[-0.7, -0.9], [-0.2, -0.9], [-0.2, 0.4], [0.7, 0.4], [0.7, 0.9], [-0.7, 0.9]])]
    if shape == "T":
        return [np.array([[-0.9, -0.9], [0.9, -0.9], [0.9, -0.4], [0.25, -0.4], [0.25, 0.9], [-0.25, 0.9], [-0.25, -0.4], [-0.9, -0.4]])]
    raise ParameterError(f"unknown shape {shape!r}")


def _densify(contour: np.ndarray, per_unit: float = 12.0) -> np.ndarray:
    pts = []
    for a, b in zip(contour, np.roll(contour, -1, axis=0)):
        k = max(1, int(math.ceil(np.linalg.norm(b - a) * per_unit)))
        t = np.arange(k)[:, None] / k
        pts.append(a + t * (b - a))
    return np.concatenate(pts)


def _place(contour: np.ndarray, angle: float, scale: float, cx: float, cy: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    rot = contour @ np.array([[c, s], [-s, c]])
    return rot * scale + np.array([cx, cy])


def _coverage(contours: list[np.ndarray], size: int, ss: int = 4) -> np.ndarray:
    """Anti-aliased even-odd fill coverage in [0, 1] via ss×ss supersampling."""
    coords = (np.arange(size * ss) + 0.5) / ss
    px, py = np.meshgrid(coords, coords)
    inside = np.zeros(px.shape, dtype=bool)
    for poly in contours:
        x1, y1 = poly[:, 0], poly[:, 1]
        x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
        for a, b, c, d in zip(x1, y1, x2, y2):
            if b == d:
                continue
            crosses = (b > py) != (d > py)
            xint = (c - a) * (py - b) / (d - b) + a
            inside ^= crosses & (px < xint)
    return inside.reshape(size, ss, size, ss).mean(axis=(1, 3))


def _stroke(polylines: list[np.ndarray], size: int, width: float) -> np.ndarray:
    """Anti-aliased stroke intensity of open polylines (pixel-centre distance)."""
    coords = np.arange(size) + 0.5
    px, py = np.meshgrid(coords, coords)
    p = np.stack([px.ravel(), py.ravel()], axis=1)
    best = np.full(len(p), np.inf)
    for line in polylines:
        if len(line) < 2:
            continue
        a, b = line[:-1], line[1:]
        ab = b - a
        denom = np.maximum((ab * ab).sum(1), 1e-12)
        t = np.clip(((p[:, None, :] - a[None]) * ab[None]).sum(2) / denom[None], 0.0, 1.0)
        closest = a[None] + t[..., None] * ab[None]
        d = np.sqrt(((p[:, None, :] - closest) ** 2).sum(2)).min(axis=1)
        best = np.minimum(best, d)
    return np.clip(1.0 - (best - width / 2.0), 0.0, 1.0).reshape(size, size)


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    images: np.ndarray  # N×C×H×W float64, values in [0, 1]
    labels: np.ndarray | None
    class_names: list[str]
    domain_tag: str = ""

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) < 1:
            raise ParameterError(f"images must be a non-empty N×C×H×W array, got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise ParameterError("one label per image required")
            if np.any(self.labels < 0) or np.any(self.labels >= len(self.class_names)):
                raise ParameterError("label outside the class vocabulary")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> list[int]:
        if self.labels is None:
            return []
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, list(self.class_names), self.domain_tag)

    def without_labels(self) -> Dataset:
        return Dataset(self.images, None, list(self.class_names), self.domain_tag)


class DomainPair:
    """Labelled source plus target whose labels are reachable only for evaluation."""

    def __init__(self, source: Dataset, target: Dataset):
        if source.labels is None:
            raise ParameterError("source dataset must carry labels")
        if list(source.class_names) != list(target.class_names):
            raise VocabularyMismatchError(f"class vocabularies differ: {source.class_names} vs {target.class_names}")
        self.source = source
        self._target = target
        self._target_view = target.without_labels()

    @property
    def class_names(self) -> list[str]:
        return list(self.source.class_names)

    @property
    def target(self) -> Dataset:
        """Training-facing target data; labels are stripped."""
        return self._target_view

    def target_for_evaluation(self) -> Dataset:
        return self._target


def _render(domain: str, shape: str, size: int, rng: SplitMix64) -> np.ndarray:
    angle = rng.uniform(0.0, 2 * np.pi)[0]
    scale = rng.uniform(0.28, 0.42)[0] * size
    margin = scale * 1.05
    cx = rng.uniform(margin, size - margin)[0]
    cy = rng.uniform(margin, size - margin)[0]
    contours = [_place(c, angle, scale, cx, cy) for c in _contours(shape)]

    if domain == "cad":
        alpha = _coverage(contours, size)
        background = rng.uniform(0.0, 0.25)[0]
        fill = rng.uniform(0.6, 1.0)[0]
        return background + alpha * (fill - background)

    if domain == "photo":
        alpha = _coverage(contours, size)
        yy, xx = np.mgrid[0:size, 0:size] + 0.5
        background = np.full((size, size), rng.uniform(0.15, 0.45)[0])
        for _ in range(rng.integers(3, 7)):
            bx, by = rng.uniform(0, size, 2)
            radius = rng.uniform(0.06, 0.2)[0] * size
            amp = rng.uniform(-0.25, 0.25)[0]
            background += amp * np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * radius**2))
        fill = background.mean() + rng.uniform(0.25, 0.5)[0]
        texture = 0.08 * rng.normal((size, size))
        noise = 0.04 * rng.normal((size, size))
        img = background + alpha * (fill + texture - background) + noise
        return np.clip(img, 0.0, 1.0)

    if domain == "sketch":
        lines = []
        unit = _contours(shape)
        for c in unit:
            dense = _densify(c)
            dense = dense + 0.04 * rng.normal(dense.shape)
            placed = _place(dense, angle, scale, cx, cy)
            closed = np.concatenate([placed, placed[:1]])
            m = len(closed) - 1
            drop = int(round(rng.uniform(0.0, 0.3)[0] * m))
            if drop:
                start = rng.integers(0, m)
                keep = [(start + drop + i) % m for i in range(m - drop + 1)]
                lines.append(closed[keep])
            else:
                lines.append(closed)
        intensity = rng.uniform(0.75, 1.0)[0]
        return intensity * _stroke(lines, size, width=rng.uniform(0.8, 1.4)[0])

    raise ParameterError(f"unknown domain {domain!r}; expected one of {DOMAINS}")


_DOMAIN_KEY = {name: i for i, name in enumerate(DOMAINS)}


def generate_shapes(domain: str, classes: int, n: int, image_size: int = 32, seed: int = 0) -> Dataset:
    """Render ``n`` single-channel images of the first ``classes`` shapes.

    Sample ``i`` has label ``i % classes`` and is drawn from its own stream
    keyed by (seed, domain, i), so rendering is order independent.
    """
    if domain not in DOMAINS:
        raise ParameterError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    if not 2 <= classes <= len(SHAPES):
        raise ParameterError(f"classes must be in 2..{len(SHAPES)}, got {classes}")
    if image_size not in IMAGE_SIZES:
        raise ParameterError(f"image_size must be one of {IMAGE_SIZES}, got {image_size}")
    if n < classes:
        raise ParameterError(f"need n >= classes, got n={n}, classes={classes}")
    labels = np.arange(n) % classes
    images = np.empty((n, 1, image_size, image_size))
    for i in range(n):
        rng = SplitMix64.derive(seed, _DOMAIN_KEY[domain], i)
        images[i, 0] = _render(domain, SHAPES[labels[i]], image_size, rng)
    # stored as float32 on disk; quantise now so files round-trip bit-exactly
    images = np.clip(images, 0.0, 1.0).astype(np.float32).astype(np.float64)
    return Dataset(images, labels, list(SHAPES[:classes]), domain)


def split_dataset(ds: Dataset, fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified split: each class sends round(fraction·count) samples to the first part."""
    if not 0 < fraction < 1:
        raise ParameterError(f"fraction must lie in (0, 1), got {fraction}")
    if ds.labels is None:
        raise SplitError("stratified split needs labels")
    rng = SplitMix64.derive(seed, 0x5B1)
    first, second = [], []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if 0 < len(idx) < 2:
            raise SplitError(f"class {ds.class_names[c]!r} has fewer than 2 samples")
        if len(idx) == 0:
            continue
        take = int(math.floor(fraction * len(idx) + 0.5))
        perm = idx[rng.permutation(len(idx))]
        first.append(perm[:take])
        second.append(perm[take:])
    a = np.sort(np.concatenate(first))
    b = np.sort(np.concatenate(second))
    if len(a) == 0 or len(b) == 0:
        raise SplitError(f"fraction {fraction} leaves one side of the split empty")
    return ds.subset(a), ds.subset(b)


# ---------------------------------------------------------------- DMDS file format

DMDS_MAGIC = b"DMDS"
DMDS_VERSION = 1


def write_dataset(ds: Dataset, path) -> None:
    n, c, h, w = ds.images.shape
    parts = [DMDS_MAGIC, struct.pack("<IIIIIBH", DMDS_VERSION, n, c, h, w, ds.labels is not None, ds.num_classes)]
    for name in ds.class_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    parts.append(ds.images.astype("<f4").tobytes())
    if ds.labels is not None:
        parts.append(ds.labels.astype("<u2").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_dataset(path) -> Dataset:
    """Parse a DMDS file. The domain tag is not stored; it is set to the file stem."""
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise TruncatedFileError("file shorter than the magic number")
    if buf[:4] != DMDS_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {DMDS_MAGIC!r}")
    head = struct.calcsize("<IIIIIBH")
    if len(buf) < 4 + head:
        raise TruncatedFileError("truncated header")
    version, n, c, h, w, has_labels, num_classes = struct.unpack_from("<IIIIIBH", buf, 4)
    if version != DMDS_VERSION:
        raise VersionMismatchError(f"unsupported DMDS version {version}")
    pos = 4 + head
    names = []
    for _ in range(num_classes):
        if pos + 2 > len(buf):
            raise TruncatedFileError("truncated class-name table")
        (length,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + length > len(buf):
            raise TruncatedFileError("truncated class name")
        names.append(buf[pos : pos + length].decode("utf-8"))
        pos += length
    count = n * c * h * w
    need = 4 * count + (2 * n if has_labels else 0)
    if pos + need > len(buf):
        raise TruncatedFileError(f"expected {need} payload bytes, found {len(buf) - pos}")
    if pos + need < len(buf):
        raise DatasetFormatError("trailing bytes after payload")
    images = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float64).reshape(n, c, h, w)
    pos += 4 * count
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=pos).astype(np.int64) if has_labels else None
    return Dataset(images, labels, names, Path(path).stem)
