"""Differentiable bilinear sampling of images at lattice positions.

Sampling coordinates are ``fixation + field_radius_px * lattice_position`` in
pixel units, where the value at integer (x, y) is the pixel at column x, row
y. Border padding clamps coordinates to the image rectangle before
interpolation, so every coordinate is valid; the fixation gradient is zero
through clamped coordinates. Zero padding is available for the attention
collapse ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import build_graph
from .lattice import SamplingLattice


class SamplerError(ValueError):
    pass


@dataclass
class Image:
    """Channel-interleaved raster, values expected in [0, 1]."""

    data: np.ndarray  # [H, W] or [H, W, C]

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3:
            raise SamplerError("image data must be [H, W] or [H, W, C]")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


@dataclass(frozen=True)
class Fixation:
    x: float
    y: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise SamplerError("fixation coordinates must be finite")


@dataclass
class FoveatedImage:
    """Per-vertex features plus the absolute pixel positions they came from."""

    features: np.ndarray   # [n_vertices, C]
    positions: np.ndarray  # [n_vertices, 2] pixel coordinates
    lattice: SamplingLattice


def _corner_data(data, coords, padding):
    """Shared bilinear machinery.

    Returns interpolation pieces for arbitrary leading coord dims:
    corner values v00, v10, v01, v11 [..., C], fractional parts fx, fy,
    and the per-axis interior masks (1 where the unclamped coordinate moves
    the clamped one).
    """
    h, w = data.shape[0], data.shape[1]
    x = coords[..., 0]
    y = coords[..., 1]
    if padding == "border":
        xc = np.clip(x, 0.0, w - 1.0)
        yc = np.clip(y, 0.0, h - 1.0)
        mx = ((x > 0.0) & (x < w - 1.0)).astype(data.dtype)
        my = ((y > 0.0) & (y < h - 1.0)).astype(data.dtype)
    elif padding == "zero":
        xc, yc, mx, my = x, y, None, None
    else:
        raise SamplerError(f"unknown padding {padding!r}")

    x0 = np.floor(xc)
    y0 = np.floor(yc)
    fx = xc - x0
    fy = yc - y0
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)
    x1i = x0i + 1
    y1i = y0i + 1

    if padding == "border":
        x0i = np.clip(x0i, 0, w - 1)
        x1i = np.clip(x1i, 0, w - 1)
        y0i = np.clip(y0i, 0, h - 1)
        y1i = np.clip(y1i, 0, h - 1)
        valid = (np.ones_like(fx),) * 4
    else:
        def inside(xi, yi):
            return ((xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)).astype(data.dtype)
        valid = (inside(x0i, y0i), inside(x1i, y0i), inside(x0i, y1i), inside(x1i, y1i))
        x0i = np.clip(x0i, 0, w - 1)
        x1i = np.clip(x1i, 0, w - 1)
        y0i = np.clip(y0i, 0, h - 1)
        y1i = np.clip(y1i, 0, h - 1)
        mx = my = None

    v00 = data[y0i, x0i] * valid[0][..., None]
    v10 = data[y0i, x1i] * valid[1][..., None]
    v01 = data[y1i, x0i] * valid[2][..., None]
    v11 = data[y1i, x1i] * valid[3][..., None]
    corners_idx = (y0i, x0i, y1i, x1i, valid)
    return v00, v10, v01, v11, fx, fy, mx, my, corners_idx


def sample_at(data, coords, padding="border"):
    """Bilinear samples of ``data`` [H, W, C] at ``coords`` [..., 2]."""
    v00, v10, v01, v11, fx, fy, _, _, _ = _corner_data(data, coords, padding)
    fx = fx[..., None]
    fy = fy[..., None]
    top = v00 * (1.0 - fx) + v10 * fx
    bot = v01 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy


def sample_at_vjp(data, coords, upstream, padding="border",
                  need_image_grad=True, need_coord_grad=True):
    """VJP of sample_at: returns (grad_data, grad_coords)."""
    v00, v10, v01, v11, fx, fy, mx, my, corners = _corner_data(data, coords, padding)
    y0i, x0i, y1i, x1i, valid = corners
    h, w, c = data.shape
    up = np.asarray(upstream)
    fxn = fx[..., None]
    fyn = fy[..., None]

    grad_coords = None
    if need_coord_grad:
        # d value / d x = (1-fy)*(v10-v00) + fy*(v11-v01), zero where clamped
        dvx = ((1.0 - fyn) * (v10 - v00) + fyn * (v11 - v01))
        dvy = ((1.0 - fxn) * (v01 - v00) + fxn * (v11 - v10))
        gx = (up * dvx).sum(axis=-1)
        gy = (up * dvy).sum(axis=-1)
        if padding == "border":
            gx = gx * mx
            gy = gy * my
        grad_coords = np.stack([gx, gy], axis=-1)

    grad_data = None
    if need_image_grad:
        w00 = (1.0 - fx) * (1.0 - fy) * valid[0]
        w10 = fx * (1.0 - fy) * valid[1]
        w01 = (1.0 - fx) * fy * valid[2]
        w11 = fx * fy * valid[3]
        grad_data = np.zeros_like(data)
        flat = grad_data.reshape(-1, c)
        for wt, yi, xi in ((w00, y0i, x0i), (w10, y0i, x1i),
                           (w01, y1i, x0i), (w11, y1i, x1i)):
            contrib = up * wt[..., None]
            lin = (yi * w + xi).ravel()
            for ch in range(c):
                flat[:, ch] += np.bincount(lin, weights=contrib[..., ch].ravel(),
                                           minlength=h * w)
        grad_data = flat.reshape(h, w, c).astype(data.dtype, copy=False)
    return grad_data, grad_coords


def sample(image: Image, lattice: SamplingLattice, fixation: Fixation,
           padding: str = "border") -> FoveatedImage:
    """Sample an image through a lattice centered on a fixation point."""
    if image.width < 1 or image.height < 1:
        raise SamplerError("image is empty")
    positions = lattice.pixel_positions((fixation.x, fixation.y))
    feats = sample_at(image.data, positions, padding)
    return FoveatedImage(features=feats, positions=positions, lattice=lattice)


def sample_vjp(image: Image, lattice: SamplingLattice, fixation: Fixation,
               upstream, padding: str = "border"):
    """Gradients of sample() w.r.t. the image and the fixation offset.

    The fixation gradient accumulates each kernel's value-vs-position
    derivative; a shared (x, y) offset moves every kernel equally, so it is
    the column sum of the per-position gradient.
    """
    positions = lattice.pixel_positions((fixation.x, fixation.y))
    up = np.asarray(upstream)
    if up.shape != (lattice.n_points, image.channels):
        raise SamplerError(
            f"upstream shape {up.shape} does not match "
            f"({lattice.n_points}, {image.channels})")
    grad_data, grad_coords = sample_at_vjp(image.data, positions, up, padding)
    grad_fixation = grad_coords.sum(axis=0)
    return grad_data, grad_fixation


def render(fov: FoveatedImage, out_w: int, out_h: int) -> Image:
    """Nearest-vertex inverse mapping of a foveated image onto a raster."""
    if fov.features.shape[0] == 0:
        raise SamplerError("foveated image is empty")
    xs = np.arange(out_w, dtype=np.float64)
    ys = np.arange(out_h, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    pixels = np.stack([gx.ravel(), gy.ravel()], axis=1)
    lo = fov.positions.min(axis=0)
    hi = fov.positions.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    # map raster corners onto the lattice bounding box
    scaled = lo + pixels / np.array([max(out_w - 1, 1), max(out_h - 1, 1)]) * span
    nearest = build_graph(fov.positions, scaled, k=1).neighbor_index[:, 0]
    data = fov.features[nearest].reshape(out_h, out_w, -1)
    return Image(data)
