"""Sampling lattice generators.

A lattice is an ordered set of 2D sampling positions in normalized sensor
coordinates. Foveated kinds (sunflower, logpolar, multifov) live on the unit
disc / unit square and are mapped to pixels at sampling time through
``field_radius_px``; the uniform kind spans ``[-extent, extent]`` on its
longer axis.

The sunflower lattice packs points along a golden-angle spiral, with square-
root radial growth inside the fovea and logarithmic spacing outside it, so
sampling density decays smoothly with eccentricity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0


class LatticeError(ValueError):
    """Invalid lattice specification."""


@dataclass(frozen=True)
class LatticeSpec:
    kind: str                     # sunflower | uniform | logpolar | multifov
    n_points: int
    fovea_points: int = 0         # sunflower only
    fovea_radius: float = 0.0     # sunflower only, fraction of unit disc
    field_radius_px: float = 112.0
    # kind-specific extras
    grid_width: int = 0
    grid_height: int = 0
    extent: float = 1.0
    n_rings: int = 0
    n_wedges: int = 0
    r_min: float = 0.05
    crop_res: int = 0
    fov_ratios: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in ("sunflower", "uniform", "logpolar", "multifov"):
            raise LatticeError(f"unknown lattice kind {self.kind!r}")
        if self.field_radius_px <= 0:
            raise LatticeError("field_radius_px must be positive")


@dataclass(frozen=True)
class SamplingLattice:
    """Ordered 2D sampling positions plus the spec that generated them."""

    positions: np.ndarray         # [n_points, 2] float64
    spec: LatticeSpec

    def __post_init__(self):
        if self.positions.shape != (self.spec.n_points, 2):
            raise LatticeError(
                f"positions shape {self.positions.shape} does not match "
                f"n_points={self.spec.n_points}"
            )

    @property
    def n_points(self) -> int:
        return self.spec.n_points

    def pixel_positions(self, fixation=(0.0, 0.0)) -> np.ndarray:
        """Positions scaled to pixels and translated by a fixation point."""
        fx, fy = float(fixation[0]), float(fixation[1])
        return self.positions * self.spec.field_radius_px + np.array([fx, fy])


def sunflower_lattice(spec: LatticeSpec) -> SamplingLattice:
    """Golden-angle spiral with a square-root fovea and logarithmic periphery.

    theta_i = 2*pi*i*phi;  rho_i = r*sqrt(i/d) for i < d-1 and r*lambda^(i-d)
    otherwise, with lambda = r^(1/(d-N)). The branch switch is at i = d-1,
    deliberately reproducing the published formula verbatim.
    """
    if spec.kind != "sunflower":
        raise LatticeError("spec.kind must be 'sunflower'")
    n, d, r = spec.n_points, spec.fovea_points, spec.fovea_radius
    if d < 2:
        raise LatticeError("fovea_points must be >= 2")
    if d >= n:
        raise LatticeError("fovea_points must be < n_points (lambda undefined otherwise)")
    if not (0.0 < r < 1.0):
        raise LatticeError("fovea_radius must lie in (0, 1)")

    i = np.arange(n, dtype=np.float64)
    theta = 2.0 * math.pi * i * GOLDEN_RATIO
    lam = r ** (1.0 / (d - n))
    rho = np.where(i < d - 1, r * np.sqrt(i / d), r * lam ** (i - d))
    pos = np.stack([rho * np.cos(theta), rho * np.sin(theta)], axis=1)
    pos[0] = 0.0  # rho_0 = 0 exactly; kill the -0.0/rounding residue
    return SamplingLattice(pos, spec)


def uniform_lattice(width: int, height: int, extent: float = 1.0,
                    field_radius_px: float = 112.0) -> SamplingLattice:
    """Row-major uniform grid centered on the origin.

    The longer axis spans [-extent, extent]; the shorter keeps the same
    spacing.
    """
    if width < 1 or height < 1:
        raise LatticeError("width and height must be >= 1")
    longer = max(width, height)
    step = 0.0 if longer == 1 else 2.0 * extent / (longer - 1)
    xs = (np.arange(width) - (width - 1) / 2.0) * step
    ys = (np.arange(height) - (height - 1) / 2.0) * step
    gx, gy = np.meshgrid(xs, ys)          # row-major: y outer, x inner
    pos = np.stack([gx.ravel(), gy.ravel()], axis=1)
    spec = LatticeSpec(kind="uniform", n_points=width * height,
                       grid_width=width, grid_height=height, extent=extent,
                       field_radius_px=field_radius_px)
    return SamplingLattice(pos, spec)


def logpolar_lattice(n_rings: int, n_wedges: int, r_min: float = 0.05,
                     field_radius_px: float = 112.0) -> SamplingLattice:
    """Ring-major log-polar lattice: geometric radii, aligned wedge angles.

    Radii run from r_min up to (but excluding) 1 with ratio
    (1/r_min)^(1/n_rings).
    """
    if n_rings < 1 or n_wedges < 1:
        raise LatticeError("n_rings and n_wedges must be >= 1")
    if not (0.0 < r_min < 1.0):
        raise LatticeError("r_min must lie in (0, 1); log spacing undefined otherwise")
    ratio = (1.0 / r_min) ** (1.0 / n_rings)
    radii = r_min * ratio ** np.arange(n_rings)
    angles = 2.0 * math.pi * np.arange(n_wedges) / n_wedges
    rr = np.repeat(radii, n_wedges)
    aa = np.tile(angles, n_rings)
    pos = np.stack([rr * np.cos(aa), rr * np.sin(aa)], axis=1)
    spec = LatticeSpec(kind="logpolar", n_points=n_rings * n_wedges,
                       n_rings=n_rings, n_wedges=n_wedges, r_min=r_min,
                       field_radius_px=field_radius_px)
    return SamplingLattice(pos, spec)


def multifov_lattice(n_crops: int, crop_res: int, fov_ratios,
                     field_radius_px: float = 112.0) -> SamplingLattice:
    """Crop-major concatenation of uniform grids with increasing field of view."""
    ratios = tuple(float(r) for r in fov_ratios)
    if len(ratios) != n_crops:
        raise LatticeError(f"n_crops={n_crops} but {len(ratios)} fov_ratios given")
    if any(b <= a for a, b in zip(ratios, ratios[1:])):
        raise LatticeError("fov_ratios must be strictly increasing")
    if ratios[-1] != 1.0:
        raise LatticeError("last fov_ratio must be 1.0")
    grids = [uniform_lattice(crop_res, crop_res, extent=r).positions for r in ratios]
    pos = np.concatenate(grids, axis=0)
    spec = LatticeSpec(kind="multifov", n_points=n_crops * crop_res * crop_res,
                       crop_res=crop_res, fov_ratios=ratios,
                       field_radius_px=field_radius_px)
    return SamplingLattice(pos, spec)


def make_lattice(spec: LatticeSpec) -> SamplingLattice:
    """Dispatch on spec.kind."""
    if spec.kind == "sunflower":
        return sunflower_lattice(spec)
    if spec.kind == "uniform":
        lat = uniform_lattice(spec.grid_width, spec.grid_height, spec.extent,
                              spec.field_radius_px)
    elif spec.kind == "logpolar":
        lat = logpolar_lattice(spec.n_rings, spec.n_wedges, spec.r_min,
                               spec.field_radius_px)
    else:
        lat = multifov_lattice(len(spec.fov_ratios), spec.crop_res,
                               spec.fov_ratios, spec.field_radius_px)
    if lat.spec.n_points != spec.n_points:
        raise LatticeError(
            f"spec.n_points={spec.n_points} inconsistent with generated "
            f"{lat.spec.n_points}"
        )
    return lat


def subsample_lattice(lattice: SamplingLattice, factor: int) -> SamplingLattice:
    """Regenerate the lattice at n_points/factor resolution.

    Sunflower keeps its fovea radius and divides both N and d; uniform strides
    the grid by sqrt(factor).
    """
    if factor < 1:
        raise LatticeError("factor must be >= 1")
    if factor == 1:
        return lattice
    spec = lattice.spec
    if spec.kind == "sunflower":
        n2, d2 = spec.n_points // factor, spec.fovea_points // factor
        if n2 <= d2 or d2 < 2:
            raise LatticeError(f"subsampling by {factor} leaves no periphery (N'={n2}, d'={d2})")
        return sunflower_lattice(LatticeSpec(
            kind="sunflower", n_points=n2, fovea_points=d2,
            fovea_radius=spec.fovea_radius, field_radius_px=spec.field_radius_px))
    if spec.kind == "uniform":
        stride = int(round(math.sqrt(factor)))
        if stride * stride != factor:
            raise LatticeError("uniform subsampling needs a square factor")
        w2, h2 = spec.grid_width // stride, spec.grid_height // stride
        if w2 < 1 or h2 < 1:
            raise LatticeError("subsampling factor exceeds grid size")
        return uniform_lattice(w2, h2, spec.extent, spec.field_radius_px)
    raise LatticeError(f"subsampling not defined for kind {spec.kind!r}")
