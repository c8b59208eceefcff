"""MNIST loading and the scaled / scaled-translated canvas variants.

Digits are bilinearly resized by a per-sample scale drawn from [1, 8] and
placed on a 224x224 zero canvas: centered for the scaled variant, uniformly
translated (kept fully inside the canvas) for the scaled-translated one.
Augmentation randomness is keyed on (seed, epoch, index) so datasets are
reproducible regardless of iteration order or worker count; eval splits use
the fixed epoch key.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sampler import sample_at

DATA_DIR_ENV = "FOVEATE_DATA_DIR"
CANVAS = 224
IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


class IdxError(ValueError):
    """Malformed IDX file."""


def load_idx(images_path, labels_path):
    """Parse big-endian IDX image/label files into ([n, r, c] in [0,1], [n])."""
    images = _read_idx(images_path, IMAGE_MAGIC, expected_ndim=3)
    labels = _read_idx(labels_path, LABEL_MAGIC, expected_ndim=1)
    if images.shape[0] != labels.shape[0]:
        raise IdxError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    return images.astype(np.float32) / 255.0, labels.astype(np.int64)


def _read_idx(path, expected_magic, expected_ndim):
    path = Path(path)
    if not path.exists():
        raise IdxError(f"no such file: {path}")
    raw = path.read_bytes()
    if len(raw) < 4:
        raise IdxError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxError(f"{path}: magic {magic}, expected {expected_magic}")
    ndim = magic & 0xFF
    if ndim != expected_ndim:
        raise IdxError(f"{path}: {ndim} dimensions, expected {expected_ndim}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxError(f"{path}: truncated dimension list")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    body = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if body.size != count:
        raise IdxError(f"{path}: expected {count} bytes of data, found {body.size}")
    return body.reshape(dims)


def resolve_data_dir(explicit=None) -> Path:
    """Dataset directory from an explicit path or the FOVEATE_DATA_DIR env var."""
    p = explicit or os.environ.get(DATA_DIR_ENV)
    if not p:
        raise IdxError(
            f"no data directory: pass one explicitly or set {DATA_DIR_ENV}")
    return Path(p)


def load_mnist(data_dir=None, split="train"):
    d = resolve_data_dir(data_dir)
    prefix = "train" if split == "train" else "t10k"
    return load_idx(d / f"{prefix}-images-idx3-ubyte",
                    d / f"{prefix}-labels-idx1-ubyte")


@dataclass(frozen=True)
class DatasetSpec:
    variant: str                 # smnist | stmnist
    seed: int = 0
    canvas: int = CANVAS
    scale_range: tuple = (1.0, 8.0)
    integer_scales: bool = False
    augment_mode: str = "per_epoch"    # per_epoch | fixed

    def __post_init__(self):
        if self.variant not in ("smnist", "stmnist"):
            raise ValueError(f"unknown variant {self.variant!r}")
        lo, hi = self.scale_range
        if not (1.0 <= lo <= hi <= 8.0):
            raise ValueError("scale_range must lie within [1, 8]")


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Center-aligned bilinear resize of a single-channel image."""
    h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    coords = np.stack([gx, gy], axis=-1)
    return sample_at(img[:, :, None].astype(np.float64), coords)[:, :, 0].astype(img.dtype)


class VariantDataset:
    """Lazy S-MNIST / ST-MNIST canvases over a base digit store."""

    def __init__(self, spec: DatasetSpec, digits: np.ndarray, labels: np.ndarray,
                 indices=None):
        self.spec = spec
        self.digits = digits
        self.labels_all = labels
        self.indices = (np.arange(digits.shape[0]) if indices is None
                        else np.asarray(indices))

    def __len__(self):
        return len(self.indices)

    @property
    def labels(self):
        return self.labels_all[self.indices]

    def subset(self, indices) -> "VariantDataset":
        return VariantDataset(self.spec, self.digits, self.labels_all,
                              self.indices[np.asarray(indices)])

    def _rng(self, index: int, epoch) -> np.random.Generator:
        e = (epoch or 0) if self.spec.augment_mode == "per_epoch" else 0
        ss = np.random.SeedSequence([self.spec.seed, int(e), int(index)])
        return np.random.Generator(np.random.PCG64(ss))

    def placement(self, position: int, epoch=None):
        """(scale, size, top_x, top_y) for one sample; deterministic per key."""
        index = int(self.indices[position])
        rng = self._rng(index, epoch)
        lo, hi = self.spec.scale_range
        if self.spec.integer_scales:
            s = float(rng.integers(int(lo), int(hi) + 1))
        else:
            s = float(rng.uniform(lo, hi))
        size = int(round(28 * s))
        canvas = self.spec.canvas
        if size > canvas:
            raise ValueError(f"scaled digit {size}px exceeds canvas {canvas}px")
        if self.spec.variant == "smnist":
            tx = ty = (canvas - size) // 2
        else:
            tx = int(rng.integers(0, canvas - size + 1))
            ty = int(rng.integers(0, canvas - size + 1))
        return s, size, tx, ty

    def canvas(self, position: int, epoch=None) -> np.ndarray:
        index = int(self.indices[position])
        _, size, tx, ty = self.placement(position, epoch)
        out = np.zeros((self.spec.canvas, self.spec.canvas), dtype=np.float32)
        out[ty:ty + size, tx:tx + size] = resize_bilinear(self.digits[index], size, size)
        return out

    def materialize(self, positions, epoch=None):
        """(canvases [n, H, W] float32, labels [n]) for the given positions."""
        positions = np.asarray(positions)
        imgs = np.empty((len(positions), self.spec.canvas, self.spec.canvas),
                        dtype=np.float32)
        for row, pos in enumerate(positions):
            imgs[row] = self.canvas(int(pos), epoch)
        return imgs, self.labels_all[self.indices[positions]]


def make_variant(spec: DatasetSpec, images: np.ndarray, labels: np.ndarray) -> VariantDataset:
    if images.ndim != 3 or images.shape[1:] != (28, 28):
        raise ValueError(f"expected [n, 28, 28] digits, got {images.shape}")
    return VariantDataset(spec, images, labels)


def split(dataset: VariantDataset, val_fraction: float, seed: int):
    """Disjoint (train, val) subsets via a seeded shuffle."""
    if not (0.0 <= val_fraction < 1.0):
        raise ValueError("val_fraction must lie in [0, 1)")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    return dataset.subset(order[n_val:]), dataset.subset(order[:n_val])


def batches(dataset: VariantDataset, batch_size: int, shuffle_seed=None, epoch=None):
    """Yield (images, labels) covering every sample exactly once.

    A shuffle seed (combined with the epoch) fixes the order; the final
    partial batch is emitted.
    """
    n = len(dataset)
    order = np.arange(n)
    if shuffle_seed is not None:
        ss = np.random.SeedSequence([int(shuffle_seed), int(epoch or 0)])
        order = np.random.Generator(np.random.PCG64(ss)).permutation(n)
    for start in range(0, n, batch_size):
        chunk = order[start:start + batch_size]
        yield dataset.materialize(chunk, epoch)


def save_variant_cache(dataset: VariantDataset, path, epoch=None):
    """Materialize every canvas to a flat binary: JSON header + uint8 pixels."""
    n = len(dataset)
    header = {
        "variant": dataset.spec.variant, "canvas": dataset.spec.canvas,
        "count": n, "seed": dataset.spec.seed, "epoch": epoch or 0,
    }
    hjson = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(b"FOVCACHE")
        fh.write(struct.pack("<I", len(hjson)))
        fh.write(hjson)
        fh.write(dataset.labels.astype(np.uint8).tobytes())
        for pos in range(n):
            fh.write((dataset.canvas(pos, epoch) * 255.0).astype(np.uint8).tobytes())


def load_variant_cache(path):
    """(images [n, H, W] float32 in [0,1], labels [n]) from a cache file."""
    with open(path, "rb") as fh:
        if fh.read(8) != b"FOVCACHE":
            raise IdxError(f"{path}: not a variant cache")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        n, c = header["count"], header["canvas"]
        labels = np.frombuffer(fh.read(n), dtype=np.uint8).astype(np.int64)
        pix = np.frombuffer(fh.read(n * c * c), dtype=np.uint8)
    return pix.reshape(n, c, c).astype(np.float32) / 255.0, labels
