"""Edge-conditioned graph convolution.

The layer gathers, for every output vertex, its neighbors' features weighted
by each precomputed Gaussian-derivative basis filter (the basis responses),
then mixes responses across channels and basis indices with learned weights.
Forward and reverse passes factor into one edge aggregation plus one matrix
multiply each, which is both the faithful reading of the two-stage design and
the fast one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .graph import BasisTensor, NeighborGraph
from .nn import ShapeError, Tape, Var, _record, parameter


class AggregationPlan:
    """Dtype-specialized adjacency and basis buffers shared between layers."""

    def __init__(self, graph: NeighborGraph, basis: BasisTensor, dtype=np.float32):
        if basis.weights.shape[:2] != (graph.n_out, graph.k):
            raise ShapeError("basis tensor does not match graph")
        self.graph = graph
        self.basis = basis
        self.dtype = np.dtype(dtype)
        self.nbr = np.ascontiguousarray(graph.neighbor_index)
        self.bas = np.ascontiguousarray(basis.weights, dtype=dtype)
        self.n_basis = basis.n_basis
        self._scratch = {}

    def scratch(self, shape, dtype):
        """Reusable buffer for gradients that never outlive a single VJP call."""
        key = (shape, np.dtype(dtype))
        buf = self._scratch.get(key)
        if buf is None:
            buf = np.empty(shape, dtype=dtype)
            self._scratch[key] = buf
        return buf

    def spread(self, x):
        """Basis responses [n_out, B, n_basis * C] from features [n_in, B, C]."""
        n_out = self.graph.n_out
        out = np.empty((n_out, x.shape[1], self.n_basis * x.shape[2]), dtype=x.dtype)
        _kernels.spread(self.nbr, self.bas.astype(x.dtype, copy=False), x, out)
        return out

    def collect(self, d_resp, channels):
        """Adjoint of spread: [n_in, B, C] from [n_out, B, n_basis * C]."""
        out = np.empty((self.graph.n_in, d_resp.shape[1], channels), dtype=d_resp.dtype)
        _kernels.collect(self.nbr, self.bas.astype(d_resp.dtype, copy=False),
                         d_resp, out)
        return out


@dataclass
class GConvLayer:
    weights: Var               # [c_out, c_in, n_basis], or [c, n_basis] depthwise
    bias: Var                  # [c_out]
    plan: AggregationPlan
    depthwise: bool = False

    @property
    def graph(self) -> NeighborGraph:
        return self.plan.graph

    @property
    def basis(self) -> BasisTensor:
        return self.plan.basis

    @property
    def c_in(self) -> int:
        return self.weights.value.shape[0] if self.depthwise else self.weights.value.shape[1]

    @property
    def c_out(self) -> int:
        return self.weights.value.shape[0]

    def mix_matrix(self):
        """Weights flattened to [(n_basis, c_in), c_out] to match spread output."""
        return np.ascontiguousarray(self.weights.value.transpose(2, 1, 0)
                                    .reshape(-1, self.c_out))


def init_layer(c_in: int, c_out: int, graph: NeighborGraph, basis: BasisTensor,
               seed: int, depthwise: bool = False, dtype=np.float32,
               plan: Optional[AggregationPlan] = None) -> GConvLayer:
    """Seeded layer: weights ~ Normal(0, 2 / (c_in * n_basis)), zero bias."""
    if depthwise and c_in != c_out:
        raise ShapeError("depthwise layers need c_in == c_out")
    rng = np.random.default_rng(seed)
    std = np.sqrt(2.0 / (c_in * basis.n_basis))
    shape = (c_out, basis.n_basis) if depthwise else (c_out, c_in, basis.n_basis)
    w = rng.normal(0.0, std, size=shape).astype(dtype)
    b = np.zeros(c_out, dtype=dtype)
    if plan is None:
        plan = AggregationPlan(graph, basis, dtype)
    return GConvLayer(weights=parameter(w), bias=parameter(b), plan=plan,
                      depthwise=depthwise)


def _normalize_features(layer, features):
    f = np.asarray(features)
    single = f.ndim == 2
    if single:
        f = f[:, None, :]
    if f.shape[0] != layer.graph.n_in or f.shape[2] != layer.c_in:
        raise ShapeError(
            f"features {np.asarray(features).shape} incompatible with layer "
            f"(n_in={layer.graph.n_in}, c_in={layer.c_in})")
    return np.ascontiguousarray(f), single


def _forward(layer: GConvLayer, f):
    """Returns (output [n_out, B, c_out], responses for reuse in the VJP)."""
    resp = layer.plan.spread(f)                        # [n_out, B, m*c_in]
    n_out, batch = resp.shape[0], resp.shape[1]
    if layer.depthwise:
        r = resp.reshape(n_out, batch, layer.plan.n_basis, layer.c_in)
        out = np.einsum("jbmc,cm->jbc", r, layer.weights.value) + layer.bias.value
    else:
        flat = resp.reshape(n_out * batch, -1)
        out = (flat @ layer.mix_matrix()).reshape(n_out, batch, layer.c_out)
        out += layer.bias.value
    return out, resp


def _backward(layer: GConvLayer, resp, upstream, need_features: bool,
              need_weights: bool):
    n_out, batch = resp.shape[0], resp.shape[1]
    up = upstream.reshape(n_out * batch, layer.c_out)
    grad_w = grad_f = None
    if layer.depthwise:
        r = resp.reshape(n_out, batch, layer.plan.n_basis, layer.c_in)
        u = upstream.reshape(n_out, batch, layer.c_out)
        if need_weights:
            grad_w = np.einsum("jbmc,jbc->cm", r, u)
        if need_features:
            d_resp = np.einsum("jbc,cm->jbmc", u, layer.weights.value)
            d_resp = d_resp.reshape(n_out, batch, -1)
            grad_f = layer.plan.collect(np.ascontiguousarray(d_resp), layer.c_in)
    else:
        flat = resp.reshape(n_out * batch, -1)
        if need_weights:
            gw = flat.T @ up                           # [(m, c_in), c_out]
            grad_w = np.ascontiguousarray(
                gw.reshape(layer.plan.n_basis, layer.c_in, layer.c_out)
                .transpose(2, 1, 0))
        if need_features:
            mix_t = np.ascontiguousarray(layer.mix_matrix().T)
            # scratch is consumed by collect before this VJP returns
            d_resp = layer.plan.scratch((n_out, batch, flat.shape[1]), up.dtype)
            np.matmul(up, mix_t, out=d_resp.reshape(n_out * batch, -1))
            grad_f = layer.plan.collect(d_resp, layer.c_in)
    grad_b = up.sum(axis=0)
    return grad_f, grad_w, grad_b


def gconv_forward(layer: GConvLayer, features):
    """Edge-conditioned convolution of per-vertex features.

    Accepts [n_in, c_in] or batched [n_in, B, c_in]; returns the matching
    output shape over the graph's output vertices.
    """
    f, single = _normalize_features(layer, features)
    out, _ = _forward(layer, f)
    return out[:, 0, :] if single else out


def gconv_vjp(layer: GConvLayer, features, upstream):
    """Adjoints of gconv_forward: (grad_features, grad_weights, grad_bias)."""
    f, single = _normalize_features(layer, features)
    up = np.asarray(upstream)
    if single:
        up = up[:, None, :]
    if up.shape != (layer.graph.n_out, f.shape[1], layer.c_out):
        raise ShapeError(f"upstream shape {np.asarray(upstream).shape} mismatch")
    _, resp = _forward(layer, f)
    grad_f, grad_w, grad_b = _backward(layer, resp, np.ascontiguousarray(up),
                                       need_features=True, need_weights=True)
    if single:
        grad_f = grad_f[:, 0, :]
    return grad_f, grad_w, grad_b


def gconv_apply(layer: GConvLayer, x: Var, tape: Optional[Tape] = None) -> Var:
    """Tape primitive; keeps the basis responses alive for the reverse pass."""
    f, single = _normalize_features(layer, x.value)
    out_val, resp = _forward(layer, f)
    out = Var(out_val[:, 0, :] if single else out_val)
    w, b = layer.weights, layer.bias

    def vjp(upstream):
        up = upstream[:, None, :] if single else upstream
        grad_f, grad_w, grad_b = _backward(
            layer, resp, np.ascontiguousarray(up),
            need_features=x.requires_grad, need_weights=w.requires_grad)
        if grad_f is not None and single:
            grad_f = grad_f[:, 0, :]
        return grad_f, grad_w, grad_b if b.requires_grad else None

    return _record(tape, out, (x, w, b), vjp)
