"""Bipartite KNN patch graphs and Gaussian-derivative basis weights.

Each output vertex is connected to its K nearest input vertices. Edges carry
the raw spatial offset delta = (x_in - x_out, y_in - y_out) and a normalized
copy divided by the patch's mean offset norm, which makes filters grow with
local sampling sparsity and renders the downstream convolution invariant to
global dilations of the lattice.

Basis weights are Hermite-polynomial Gaussian derivatives evaluated on the
normalized offsets, then normalized per patch: the plain Gaussian by its l1
norm, every derivative order by mean subtraction followed by its l2 norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEGENERATE_EPS = 1e-6


class GraphError(ValueError):
    """Invalid graph construction arguments."""


@dataclass(frozen=True)
class NeighborGraph:
    n_in: int
    n_out: int
    k: int
    neighbor_index: np.ndarray   # [n_out, K] int64, into input vertices
    delta_raw: np.ndarray        # [n_out, K, 2]
    delta_norm: np.ndarray       # [n_out, K, 2]


@dataclass(frozen=True)
class BasisTensor:
    weights: np.ndarray          # [n_out, K, n_basis]
    sigma: float
    max_order: int
    basis_orders: tuple          # ((m_x, m_y), ...) row-major in m_x

    @property
    def n_basis(self) -> int:
        return len(self.basis_orders)


def knn_brute(input_positions, output_positions, k: int) -> np.ndarray:
    """Exact KNN by full distance matrix; ties broken by lower input index."""
    pin = np.asarray(input_positions, dtype=np.float64)
    pout = np.asarray(output_positions, dtype=np.float64)
    d2 = ((pout[:, None, :] - pin[None, :, :]) ** 2).sum(axis=2)
    idx = np.arange(pin.shape[0])
    out = np.empty((pout.shape[0], k), dtype=np.int64)
    for j in range(pout.shape[0]):
        order = np.lexsort((idx, d2[j]))
        out[j] = order[:k]
    return out


class GridIndex:
    """Uniform-cell spatial index for exact 2D KNN queries.

    Cells are searched in expanding square rings; the search stops once the
    ring's nearest possible point is farther than the current k-th candidate.
    Results match knn_brute exactly, including the lower-index tie rule.
    """

    def __init__(self, points, cell_target: float = 2.0):
        self.points = np.asarray(points, dtype=np.float64)
        n = self.points.shape[0]
        lo = self.points.min(axis=0)
        hi = self.points.max(axis=0)
        span = np.maximum(hi - lo, 1e-12)
        # aim for ~cell_target points per cell
        ncells = max(1, int(math.sqrt(n / cell_target)))
        self.nx = self.ny = ncells
        self.lo = lo
        self.cell = span / ncells
        cx = np.clip(((self.points[:, 0] - lo[0]) / self.cell[0]).astype(np.int64), 0, ncells - 1)
        cy = np.clip(((self.points[:, 1] - lo[1]) / self.cell[1]).astype(np.int64), 0, ncells - 1)
        flat = cy * ncells + cx
        order = np.argsort(flat, kind="stable")
        self._sorted_idx = order
        self._starts = np.searchsorted(flat[order], np.arange(ncells * ncells + 1))

    def _cell_points(self, cx: int, cy: int) -> np.ndarray:
        f = cy * self.nx + cx
        return self._sorted_idx[self._starts[f]:self._starts[f + 1]]

    def query(self, q, k: int) -> np.ndarray:
        qx, qy = float(q[0]), float(q[1])
        cx = min(max(int((qx - self.lo[0]) / self.cell[0]), 0), self.nx - 1)
        cy = min(max(int((qy - self.lo[1]) / self.cell[1]), 0), self.ny - 1)
        cand: list[np.ndarray] = []
        n_cand = 0
        max_ring = max(self.nx, self.ny)
        for ring in range(max_ring + 1):
            for yy in range(cy - ring, cy + ring + 1):
                if not (0 <= yy < self.ny):
                    continue
                xs = (range(cx - ring, cx + ring + 1)
                      if yy in (cy - ring, cy + ring)
                      else (cx - ring, cx + ring))
                for xx in xs:
                    if 0 <= xx < self.nx:
                        pts = self._cell_points(xx, yy)
                        if pts.size:
                            cand.append(pts)
                            n_cand += pts.size
            if n_cand < k:
                continue
            ids = np.concatenate(cand)
            d2 = (self.points[ids, 0] - qx) ** 2 + (self.points[ids, 1] - qy) ** 2
            order = np.lexsort((ids, d2))
            searched_all = ring >= max_ring
            bound = self._frontier_distance(qx, qy, cx, cy, ring)
            if searched_all or d2[order[k - 1]] < bound * bound:
                return ids[order[:k]]
        raise GraphError("grid KNN search exhausted without k candidates")

    def _frontier_distance(self, qx, qy, cx, cy, ring) -> float:
        """Distance from q to the boundary of the searched cell rectangle.

        Any point not yet examined is at least this far away, which makes the
        expanding-ring search exact.
        """
        x0 = self.lo[0] + (cx - ring) * self.cell[0]
        x1 = self.lo[0] + (cx + ring + 1) * self.cell[0]
        y0 = self.lo[1] + (cy - ring) * self.cell[1]
        y1 = self.lo[1] + (cy + ring + 1) * self.cell[1]
        return max(0.0, min(qx - x0, x1 - qx, qy - y0, y1 - qy))


def knn_grid(input_positions, output_positions, k: int) -> np.ndarray:
    """Exact KNN via the grid index; identical output to knn_brute."""
    index = GridIndex(input_positions)
    pout = np.asarray(output_positions, dtype=np.float64)
    out = np.empty((pout.shape[0], k), dtype=np.int64)
    for j in range(pout.shape[0]):
        out[j] = index.query(pout[j], k)
    return out


def build_graph(input_positions, output_positions, k: int,
                method: str = "grid") -> NeighborGraph:
    """Connect each output vertex to its k nearest input vertices.

    delta_raw[j, i] = input_pos[neighbor] - output_pos[j]; delta_norm divides
    each patch by its mean offset norm (guarded below DEGENERATE_EPS).
    """
    pin = np.asarray(input_positions, dtype=np.float64)
    pout = np.asarray(output_positions, dtype=np.float64)
    if pin.ndim != 2 or pin.shape[1] != 2 or pout.ndim != 2 or pout.shape[1] != 2:
        raise GraphError("positions must be [n, 2] arrays")
    if not (np.isfinite(pin).all() and np.isfinite(pout).all()):
        raise GraphError("positions must be finite")
    if k > pin.shape[0]:
        raise GraphError(f"k={k} exceeds n_in={pin.shape[0]}")
    if k < 1:
        raise GraphError("k must be >= 1")

    if method == "grid":
        nbr = knn_grid(pin, pout, k)
    elif method == "brute":
        nbr = knn_brute(pin, pout, k)
    else:
        raise GraphError(f"unknown KNN method {method!r}")

    delta_raw = pin[nbr] - pout[:, None, :]
    norms = np.linalg.norm(delta_raw, axis=2)            # [n_out, K]
    mean_norm = np.maximum(norms.mean(axis=1), DEGENERATE_EPS)
    delta_norm = delta_raw / mean_norm[:, None, None]
    return NeighborGraph(n_in=pin.shape[0], n_out=pout.shape[0], k=k,
                         neighbor_index=nbr, delta_raw=delta_raw,
                         delta_norm=delta_norm)


_HERMITE_COEFFS = {
    0: (1.0,),
    1: (0.0, 2.0),
    2: (-2.0, 0.0, 4.0),
    3: (0.0, -12.0, 0.0, 8.0),
    4: (12.0, 0.0, -48.0, 0.0, 16.0),
    5: (0.0, 120.0, 0.0, -160.0, 0.0, 32.0),
}


def hermite(m: int, x):
    """Physicists' Hermite polynomial H_m(x) for m in 0..5."""
    if not (0 <= m <= 5):
        raise GraphError(f"hermite order {m} outside the tabulated range 0..5")
    coeffs = _HERMITE_COEFFS[m]
    x = np.asarray(x, dtype=np.float64)
    acc = np.zeros_like(x)
    for power in range(len(coeffs) - 1, -1, -1):  # Horner
        acc = acc * x + coeffs[power]
    return acc if acc.ndim else float(acc)


def basis_orders(max_order: int) -> tuple:
    """(m_x, m_y) pairs with max(m_x, m_y) <= M, m_x-major."""
    return tuple((mx, my) for mx in range(max_order + 1)
                 for my in range(max_order + 1))


def gaussian_derivative(x, y, sigma: float, m) -> np.ndarray:
    """Raw 2D Gaussian-derivative filter value at (x, y) for order m=(mx, my).

    (-1)^(mx*my) * H_mx(x/(sigma*sqrt2)) * H_my(y/(sigma*sqrt2)) * G(x, y, sigma)
    with the unnormalized window G = exp(-(x^2+y^2)/(2 sigma^2)).
    """
    mx, my = m
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    s = sigma * math.sqrt(2.0)
    sign = -1.0 if (mx * my) % 2 else 1.0
    window = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return sign * hermite(mx, x / s) * hermite(my, y / s) * window


def evaluate_basis(graph: NeighborGraph, sigma: float, max_order: int) -> BasisTensor:
    """Precompute per-edge basis weights on the normalized offsets.

    Per patch and basis index: the (0,0) Gaussian is divided by its l1 norm;
    every other order is mean-subtracted and divided by its l2 norm. Norms are
    guarded at DEGENERATE_EPS, so degenerate patches yield zeros, never NaN.
    """
    if sigma <= 0:
        raise GraphError("sigma must be positive")
    if max_order < 0:
        raise GraphError("max_order must be >= 0")
    orders = basis_orders(max_order)
    dx = graph.delta_norm[:, :, 0]
    dy = graph.delta_norm[:, :, 1]
    weights = np.empty((graph.n_out, graph.k, len(orders)), dtype=np.float64)
    for b, (mx, my) in enumerate(orders):
        raw = gaussian_derivative(dx, dy, sigma, (mx, my))
        if mx == 0 and my == 0:
            l1 = np.maximum(np.abs(raw).sum(axis=1), DEGENERATE_EPS)
            weights[:, :, b] = raw / l1[:, None]
        else:
            centered = raw - raw.mean(axis=1)[:, None]
            l2 = np.maximum(np.linalg.norm(centered, axis=1), DEGENERATE_EPS)
            weights[:, :, b] = centered / l2[:, None]
    return BasisTensor(weights=weights, sigma=float(sigma),
                       max_order=int(max_order), basis_orders=orders)


# re-export: subsampling operates on lattices and lives with them
from .lattice import subsample_lattice  # noqa: E402,F401
