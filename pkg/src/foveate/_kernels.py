"""JIT-compiled edge-aggregation loops for the graph convolution.

Two memory-bound kernels: ``spread`` gathers neighbor features weighted by
every basis filter (producing per-vertex basis responses in mix-ready
layout), ``collect`` is its adjoint, scattering response gradients back to
input vertices through the precomputed reverse adjacency. Both write each
output row exactly once, in a fixed order, so results are deterministic.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def spread(nbr, bas, x, out):
    """out[j, b, m*C+t] = sum_k bas[j, k, m] * x[nbr[j, k], b, t].

    x: [n_in, B, C]; bas: [n_out, K, M]; out: [n_out, B, M*C].
    """
    n_out, K, M = bas.shape
    B = x.shape[1]
    C = x.shape[2]
    for j in range(n_out):
        oj = out[j]
        oj[:] = 0.0
        for k in range(K):
            xi = x[nbr[j, k]]
            for m in range(M):
                w = bas[j, k, m]
                base = m * C
                for b in range(B):
                    row = oj[b]
                    src = xi[b]
                    for t in range(C):
                        row[base + t] += w * src[t]


@njit(cache=True)
def bn_relu_forward(x, gamma, beta, out, xhat, mean, var, inv_std, eps):
    """Fused train-mode batchnorm + ReLU over rows of x [N, C].

    mean/var/inv_std are float64 accumulators (E[x^2] - E[x]^2 needs the
    headroom); xhat is kept for the backward pass and
    out = relu(gamma * xhat + beta).
    """
    n, c = x.shape
    mean[:] = 0.0
    var[:] = 0.0
    for r in range(n):
        row = x[r]
        for t in range(c):
            v = np.float64(row[t])
            mean[t] += v
            var[t] += v * v
    for t in range(c):
        mean[t] /= n
        v = var[t] / n - mean[t] * mean[t]
        if v < 0.0:
            v = 0.0
        var[t] = v
        inv_std[t] = 1.0 / np.sqrt(v + eps)
    for r in range(n):
        xr = x[r]
        hr = xhat[r]
        orow = out[r]
        for t in range(c):
            h = (xr[t] - mean[t]) * inv_std[t]
            hr[t] = h
            a = gamma[t] * h + beta[t]
            orow[t] = a if a > 0.0 else 0.0


@njit(cache=True)
def bn_relu_backward(up, out, xhat, gamma, inv_std, gx, ggamma, gbeta):
    """Backward of bn_relu_forward through the batch statistics.

    The ReLU mask is recovered from the stored activations (out > 0). Using
    sum(gxhat) = gamma * gbeta and sum(gxhat * xhat) = gamma * ggamma, the
    input gradient needs only two passes.
    """
    n, c = up.shape
    ggamma[:] = 0.0
    gbeta[:] = 0.0
    for r in range(n):
        ur = up[r]
        orow = out[r]
        hr = xhat[r]
        for t in range(c):
            if orow[t] > 0.0:
                u = ur[t]
                gbeta[t] += u
                ggamma[t] += u * hr[t]
    c1 = np.empty(c, dtype=up.dtype)
    c2 = np.empty(c, dtype=up.dtype)
    for t in range(c):
        c1[t] = gbeta[t] * gamma[t] / n
        c2[t] = ggamma[t] * gamma[t] / n
    for r in range(n):
        ur = up[r]
        orow = out[r]
        hr = xhat[r]
        gr = gx[r]
        for t in range(c):
            u = ur[t] if orow[t] > 0.0 else 0.0
            gr[t] = inv_std[t] * (u * gamma[t] - c1[t] - hr[t] * c2[t])


@njit(cache=True)
def collect(nbr, bas, d_resp, out):
    """Adjoint of spread: out[i, b, t] += bas[j, k, m] * d_resp[j, b, m*C+t]
    over all edges (j, k) with nbr[j, k] == i.

    Iterates output-vertex-major so each d_resp row block is streamed exactly
    once; the fixed edge order keeps accumulation deterministic.
    d_resp: [n_out, B, M*C]; out: [n_in, B, C].
    """
    n_out, K, M = bas.shape
    B = out.shape[1]
    C = out.shape[2]
    out[:] = 0.0
    for j in range(n_out):
        dj = d_resp[j]
        for k in range(K):
            oi = out[nbr[j, k]]
            for m in range(M):
                w = bas[j, k, m]
                base = m * C
                for b in range(B):
                    row = oi[b]
                    src = dj[b]
                    for t in range(C):
                        row[t] += w * src[base + t]
