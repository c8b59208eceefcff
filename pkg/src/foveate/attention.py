"""Expectation-based attention: saliency softmax over vertex positions.

A 1x1 projection of the per-vertex feature map gives a single-channel
saliency map; the next fixation is the softmax-weighted expected coordinate.
Gradients flow to the features, the projection, and the positions, so the
whole fixation loop trains by backpropagation alone.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .nn import ShapeError, Tape, Var, _record, parameter


class AttentionHead:
    """Weights of the 1x1 saliency convolution."""

    def __init__(self, channels: int, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.w = parameter(rng.normal(0.0, np.sqrt(1.0 / channels),
                                      size=channels).astype(dtype))
        self.b = parameter(np.zeros((), dtype=dtype))

    @property
    def params(self):
        return [self.w, self.b]


def attend(head: AttentionHead, features: Var, positions: Var,
           tape: Optional[Tape] = None) -> Var:
    """Expected fixation coordinate under the saliency distribution.

    features: [n, c] or [n, B, c]; positions: matching [n, 2] / [n, B, 2] in
    absolute pixel coordinates. Returns [2] / [B, 2].
    """
    f = features.value
    pos = positions.value
    single = f.ndim == 2
    if f.shape[0] == 0:
        raise ShapeError("attend: empty vertex set")
    fv = f[:, None, :] if single else f
    pv = pos[:, None, :] if single else pos
    if pv.shape[:2] != fv.shape[:2] or pv.shape[2] != 2:
        raise ShapeError(f"positions {pos.shape} incompatible with features {f.shape}")

    s = fv @ head.w.value + head.b.value            # [n, B]
    s = s - s.max(axis=0, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=0, keepdims=True)            # softmax over vertices
    fix = np.einsum("nb,nbt->bt", p, pv)            # [B, 2]
    out = Var(fix[0] if single else fix)

    def vjp(up):
        u = up[None, :] if single else up           # [B, 2]
        dp = np.einsum("bt,nbt->nb", u, pv)
        ds = p * (dp - (p * dp).sum(axis=0, keepdims=True))
        gf = gp = gw = gb = None
        if features.requires_grad:
            gf = ds[:, :, None] * head.w.value
            gf = gf[:, 0, :] if single else gf
            gf = gf.astype(f.dtype, copy=False)
        if positions.requires_grad:
            gp = p[:, :, None] * u[None, :, :]
            gp = gp[:, 0, :] if single else gp
            gp = gp.astype(pos.dtype, copy=False)
        if head.w.requires_grad:
            gw = np.einsum("nb,nbc->c", ds, fv).astype(head.w.value.dtype)
        if head.b.requires_grad:
            gb = np.asarray(ds.sum(), dtype=head.b.value.dtype)
        return gf, gp, gw, gb

    return _record(tape, out, (features, positions, head.w, head.b), vjp)


def random_policy(rng: np.random.Generator, image_extent) -> np.ndarray:
    """Uniform fixation over the image rectangle (width, height) in pixels."""
    w, h = image_extent
    return np.array([rng.uniform(0.0, w - 1.0), rng.uniform(0.0, h - 1.0)])
