"""Rasters, patch tiling, splitting, normalisation and synthetic scenes.

LVIM raster layout (little-endian)::

    b"LVIM" | version u32 = 1 | height u32 | width u32 | bands u32 | dtype u8 | payload

dtype 1 is float32, dtype 2 is uint8; the payload is row-major, channel-last.
Masks are single-band uint8 rasters holding {0, 1}.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .archive import _atomic_write

log = logging.getLogger(__name__)

MAGIC = b"LVIM"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
_HEADER = struct.Struct("<4sIIIIB")

# synthetic scenes: bands 0-2 play RGB, 3-5 play the NIR triplet
RGB_BANDS = (0, 1, 2)
NIR_BANDS = (3, 4, 5)


class RasterError(ValueError):
    pass


@dataclass
class Raster:
    data: np.ndarray  # height x width x bands
    band_labels: list[str] | None = None

    def __post_init__(self):
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3 or 0 in self.data.shape:
            raise RasterError(f"raster must be H x W x bands with nonzero sizes, got {self.data.shape}")
        if self.data.dtype.kind == "f" and not np.isfinite(self.data).all():
            raise RasterError("raster contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]


def encode_raster(r: Raster) -> bytes:
    if r.data.dtype == np.uint8:
        code, payload = 2, r.data
    else:
        code, payload = 1, r.data.astype("<f4")
    header = _HEADER.pack(MAGIC, VERSION, r.height, r.width, r.bands, code)
    return header + np.ascontiguousarray(payload).tobytes()


def write_raster(path, r: Raster) -> None:
    _atomic_write(Path(path), encode_raster(r))


def load_raster(path) -> Raster:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise RasterError(f"{path}: truncated header")
    magic, version, h, w, b, code = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise RasterError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise RasterError(f"{path}: unsupported version {version}")
    if 0 in (h, w, b):
        raise RasterError(f"{path}: zero dimension {h}x{w}x{b}")
    if code not in _DTYPES:
        raise RasterError(f"{path}: unknown dtype code {code}")
    dt = _DTYPES[code]
    n = h * w * b
    if len(blob) - _HEADER.size != n * dt.itemsize:
        raise RasterError(f"{path}: payload is {len(blob) - _HEADER.size} bytes, expected {n * dt.itemsize}")
    data = np.frombuffer(blob, dtype=dt, count=n, offset=_HEADER.size).reshape(h, w, b)
    data = data.astype(np.float32) if code == 1 else data.copy()
    return Raster(data)


def select_bands(r: Raster, indices) -> Raster:
    indices = [int(i) for i in indices]
    if len(indices) != 3:
        raise RasterError(f"exactly 3 band indices are needed, got {indices}")
    bad = [i for i in indices if not 0 <= i < r.bands]
    if bad:
        raise RasterError(f"band indices {bad} out of range for a {r.bands}-band raster")
    labels = [r.band_labels[i] for i in indices] if r.band_labels else None
    return Raster(r.data[:, :, indices].copy(), labels)


@dataclass
class SamplePatch:
    image: np.ndarray  # 3 x size x size float32
    mask: np.ndarray  # size x size uint8
    origin: tuple[str, int, int]


def patch_grid(height: int, width: int, size: int) -> tuple[int, int]:
    return height // size, width // size


def patchify(r: Raster, mask: Raster, size: int = 224, raster_id: str = "") -> list[SamplePatch]:
    """Non-overlapping row-major tiles; a trailing strip narrower than ``size`` is dropped."""
    if (mask.height, mask.width) != (r.height, r.width):
        raise RasterError(f"mask {mask.height}x{mask.width} does not match raster {r.height}x{r.width}")
    if mask.bands != 1:
        raise RasterError("mask must be single-band")
    m = mask.data[:, :, 0]
    if not np.isin(m, (0, 1)).all():
        raise RasterError("mask values must be 0 or 1")
    rows, cols = patch_grid(r.height, r.width, size)
    if rows == 0 or cols == 0:
        raise RasterError(f"raster {r.height}x{r.width} is smaller than one {size}x{size} patch")
    out = []
    for i in range(rows):
        for j in range(cols):
            y, x = i * size, j * size
            img = np.ascontiguousarray(r.data[y : y + size, x : x + size].transpose(2, 0, 1), dtype=np.float32)
            out.append(SamplePatch(img, m[y : y + size, x : x + size].astype(np.uint8), (raster_id, y, x)))
    return out


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.72, 0.20, 0.08)
    seed: int = 0

    def __post_init__(self):
        if sum(Fraction(str(r)) for r in self.ratios) != 1:
            raise ValueError(f"split ratios must sum to 1, got {self.ratios}")


@dataclass
class Splits:
    train: list
    test: list
    val: list


def split_sizes(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    train_r, test_r, _ = (Fraction(str(r)) for r in spec.ratios)
    cut1 = math.floor(n * train_r)
    cut2 = math.floor(n * (train_r + test_r))
    return cut1, cut2 - cut1, n - cut2


def split(patches: list, spec: SplitSpec = SplitSpec()) -> Splits:
    """Seeded shuffle, then contiguous cuts at floor(0.72 n) and floor(0.92 n)."""
    n = len(patches)
    if n < 3:
        raise ValueError(f"need at least 3 patches to split, got {n}")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train, n_test, _ = split_sizes(n, spec)
    picked = [patches[i] for i in order]
    return Splits(picked[:n_train], picked[n_train : n_train + n_test], picked[n_train + n_test :])


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], np.float64), np.asarray(d["std"], np.float64))


def fit_norm_stats(train: list[SamplePatch]) -> NormStats:
    stack = np.stack([p.image for p in train]).astype(np.float64)
    mean = stack.mean(axis=(0, 2, 3))
    std = stack.std(axis=(0, 2, 3))
    for c in np.flatnonzero(std == 0):
        log.warning("channel %d has zero variance in the training split; centring only", c)
    return NormStats(mean, std)


def normalize(patch: SamplePatch, stats: NormStats) -> SamplePatch:
    std = np.where(stats.std > 0, stats.std, 1.0)
    img = (patch.image - stats.mean[:, None, None]) / std[:, None, None]
    return SamplePatch(img.astype(np.float32), patch.mask, patch.origin)


def gen_synthetic(n: int, seed: int, height: int = 224, width: int = 224, bands: int = 6) -> list[tuple[Raster, Raster]]:
    """Smooth background plus elliptical blobs that are bright in the NIR bands.

    The RGB bands carry a weak, noisy copy of the blob signal; the NIR bands a
    strong one, so NIR inputs separate the target more easily.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if bands < 6:
        raise ValueError("synthetic scenes need at least 6 bands (3 RGB + 3 NIR)")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    out = []
    for _ in range(n):
        mask = np.zeros((height, width), bool)
        scale = min(height, width)
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            ay, ax = rng.uniform(0.12, 0.3, size=2) * scale
            theta = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = dx * np.cos(theta) + dy * np.sin(theta)
            v = -dx * np.sin(theta) + dy * np.cos(theta)
            mask |= (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
        data = np.empty((height, width, bands), np.float64)
        for b in range(bands):
            fy, fx = rng.uniform(0.5, 2.0, size=2) * 2 * np.pi / scale
            phase = rng.uniform(0, 2 * np.pi, size=2)
            # background in [0.2, 0.4]
            background = 0.3 + 0.05 * np.sin(fy * yy + phase[0]) + 0.05 * np.cos(fx * xx + phase[1])
            gain = 0.45 if b in NIR_BANDS else 0.04
            noise = rng.uniform(-0.03, 0.03, size=(height, width)) if b in NIR_BANDS else rng.normal(0, 0.08, (height, width))
            data[:, :, b] = background + gain * mask + noise
        labels = ["red", "green", "blue", "nir1", "nir2", "nir3"] + [f"b{i}" for i in range(6, bands)]
        out.append((Raster(data.astype(np.float32), labels), Raster(mask.astype(np.uint8)[:, :, None])))
    return out


def write_synthetic(out_dir, n: int, seed: int, height: int = 224, width: int = 224) -> list[Path]:
    out_dir = Path(out_dir)
    written = []
    for i, (img, mask) in enumerate(gen_synthetic(n, seed, height, width)):
        for kind, r in (("image", img), ("mask", mask)):
            p = out_dir / f"{i:04d}.{kind}.lvim"
            write_raster(p, r)
            written.append(p)
    return written


def find_pairs(data_dir) -> list[tuple[Path, Path]]:
    """``NNNN.image.lvim`` / ``NNNN.mask.lvim`` pairs in name order."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {data_dir}")
    pairs = []
    for img in sorted(data_dir.glob("*.image.lvim")):
        mask = img.with_name(img.name.replace(".image.lvim", ".mask.lvim"))
        if not mask.exists():
            raise FileNotFoundError(f"missing mask for {img}: {mask}")
        pairs.append((img, mask))
    if not pairs:
        raise FileNotFoundError(f"no *.image.lvim files in {data_dir}")
    return pairs


def load_patches(data_dir, bands, size: int) -> list[SamplePatch]:
    patches = []
    for img_path, mask_path in find_pairs(data_dir):
        img = select_bands(load_raster(img_path), bands)
        patches += patchify(img, load_raster(mask_path), size, raster_id=img_path.name.split(".")[0])
    return patches


def stack(patches: list[SamplePatch]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([p.image for p in patches]), np.stack([p.mask for p in patches])
