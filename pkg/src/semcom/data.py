"""Image corpora: binary PPM ingestion, synthetic images, batching."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from . import rng as rngmod


class PPMError(ValueError):
    pass


@dataclass
class Dataset:
    """Images stacked as [n, h, w, 3] float64 in [0, 1]."""

    images: np.ndarray
    split: str = "train"
    source: str = ""

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError(f"expected [n, h, w, 3], got {self.images.shape}")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i) -> np.ndarray:
        return self.images[i]

    @property
    def extent(self) -> tuple:
        return self.images.shape[1:3]


# ---------------------------------------------------------------------------
# PPM


def _header_tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens: List[bytes] = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise PPMError("truncated PPM header")
        if buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise PPMError("missing whitespace after PPM header")
    return tokens, pos + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    """Binary P6 (maxval 255) -> uint8 [h, w, 3]."""
    tokens, offset = _header_tokens(buf, 4)
    if tokens[0] != b"P6":
        raise PPMError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PPMError("non-numeric PPM header field") from exc
    if w < 1 or h < 1:
        raise PPMError(f"bad PPM extents {w}x{h}")
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval}")
    need = w * h * 3
    raster = buf[offset:offset + need]
    if len(raster) != need:
        raise PPMError(f"PPM raster has {len(raster)} bytes, expected {need}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def encode_ppm(img: np.ndarray) -> bytes:
    """uint8 [h, w, 3], or floats in [0, 1] (rounded), -> P6 bytes."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("image must be [h, w, 3]")
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(path: Union[str, Path], img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


def center_crop(img: np.ndarray, crop: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h < crop or w < crop:
        raise PPMError(f"image {h}x{w} smaller than crop {crop}")
    top, left = (h - crop) // 2, (w - crop) // 2
    return img[top:top + crop, left:left + crop]


def load_ppm_dir(path: Union[str, Path], crop: int, limit: Optional[int] = None,
                 split: str = "train") -> Dataset:
    """Every ``*.ppm`` in ``path``, byte-wise sorted by filename, center-cropped."""
    path = Path(path)
    names = sorted((n for n in os.listdir(path) if n.lower().endswith(".ppm")), key=os.fsencode)
    if limit is not None:
        names = names[:limit]
    if not names:
        raise PPMError(f"no .ppm files in {path}")
    imgs = [center_crop(read_ppm(path / n), crop).astype(np.float64) / 255.0 for n in names]
    return Dataset(np.stack(imgs), split=split, source=str(path))


# ---------------------------------------------------------------------------
# synthetic images


def _blur(field: np.ndarray, sigma: float) -> np.ndarray:
    """Separable circular Gaussian blur over axes 0 and 1 with a fixed sum order."""
    radius = max(1, int(3 * sigma))
    taps = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (taps / sigma) ** 2)
    kernel /= kernel.sum()
    for axis in (0, 1):
        acc = np.zeros_like(field)
        for t, k in zip(taps, kernel):
            acc += k * np.roll(field, int(t), axis=axis)
        field = acc
    return field


def synth_image(extent: int, gen: np.random.Generator) -> np.ndarray:
    """Random smooth field + linear ramp + checkerboard, min-max scaled to [0, 1]."""
    sigma = gen.uniform(1.5, 4.0)
    field = _blur(gen.standard_normal((extent, extent, 3)), sigma)
    field /= field.std() + 1e-12

    theta = gen.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.meshgrid(np.arange(extent), np.arange(extent), indexing="ij")
    ramp = (np.cos(theta) * xx + np.sin(theta) * yy) / extent
    ramp = ramp[:, :, None] * gen.uniform(-1.0, 1.0, size=3)

    cell = int(gen.choice([4, 8]))
    checker = (((yy // cell) + (xx // cell)) % 2).astype(np.float64) - 0.5
    checker = checker[:, :, None] * gen.uniform(0.0, 0.6, size=3)

    weights = gen.uniform(0.5, 1.5, size=3)
    img = weights[0] * field + weights[1] * 2.0 * ramp + weights[2] * checker
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)


def synth_dataset(n: int, extent: int, seed: int, split: str = "train") -> Dataset:
    if n < 1:
        raise ValueError("n must be at least 1")
    imgs = [synth_image(extent, rngmod.stream(seed, "synth/" + split, i)) for i in range(n)]
    return Dataset(np.stack(imgs), split=split, source=f"synthetic(n={n}, extent={extent}, seed={seed})")


# ---------------------------------------------------------------------------
# batching


def batches(dataset: Dataset, batch_size: int, gen: np.random.Generator) -> List[np.ndarray]:
    """Index arrays for one epoch: a fresh permutation cut into batches (last may be short)."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    order = gen.permutation(n)
    return [order[start:start + batch_size] for start in range(0, n, batch_size)]


@dataclass(frozen=True)
class DataConfig:
    """Where images come from: ``source`` is 'synthetic' or 'ppm'."""

    source: str = "synthetic"
    extent: int = 32
    train_n: int = 64
    test_n: int = 16
    seed: int = 0
    train_dir: str = ""
    test_dir: str = ""

    def __post_init__(self):
        if self.source not in ("synthetic", "ppm"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.extent < 1 or self.train_n < 1 or self.test_n < 1:
            raise ValueError("extent, train_n and test_n must be positive")
        if self.source == "ppm" and not (self.train_dir and self.test_dir):
            raise ValueError("ppm source needs train_dir and test_dir")


def load_datasets(cfg: DataConfig):
    """(train, test) datasets for a data config."""
    if cfg.source == "synthetic":
        return (synth_dataset(cfg.train_n, cfg.extent, cfg.seed, "train"),
                synth_dataset(cfg.test_n, cfg.extent, cfg.seed, "test"))
    return (load_ppm_dir(cfg.train_dir, cfg.extent, cfg.train_n, "train"),
            load_ppm_dir(cfg.test_dir, cfg.extent, cfg.test_n, "test"))
