"""Reverse-mode tape and the differentiable primitives built on it.

Every primitive evaluates its forward result immediately and, when handed a
Tape and at least one input that requires gradients, records a closure
computing its vector-Jacobian product. ``Tape.backward`` walks the records in
exact reverse order; adjoints at fan-out points accumulate additively.

Also houses batch normalization state, the AdamW update with decoupled weight
decay, and the warmup/cosine learning-rate schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class ShapeError(ValueError):
    pass


class Var:
    """Array node tracked by a Tape."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self._records = []

    def __len__(self):
        return len(self._records)

    def add(self, output: Var, inputs, vjp):
        """Register a primitive application. ``vjp(upstream)`` must return one
        gradient array (or None) per input, freshly allocated."""
        self._records.append((output, tuple(inputs), vjp))

    def backward(self, root: Var, seed=None):
        """Accumulate gradients of ``root`` into every reachable input."""
        if seed is None:
            seed = np.ones_like(root.value)
        root.grad = np.asarray(seed, dtype=root.value.dtype)
        for output, inputs, vjp in reversed(self._records):
            if output.grad is None:
                continue
            grads = vjp(output.grad)
            for v, g in zip(inputs, grads):
                if g is None or not v.requires_grad:
                    continue
                if v.grad is None:
                    v.grad = g
                else:
                    v.grad += g


def _record(tape: Optional[Tape], output: Var, inputs, vjp):
    output.requires_grad = any(v.requires_grad for v in inputs)
    if tape is not None and output.requires_grad:
        tape.add(output, inputs, vjp)
    return output


def constant(value) -> Var:
    return Var(value, requires_grad=False)


def parameter(value) -> Var:
    return Var(np.asarray(value), requires_grad=True)


# ---------------------------------------------------------------- primitives

def dense(x: Var, w: Var, b: Var, tape: Optional[Tape] = None) -> Var:
    """Affine map on the last axis: y = x @ w.T + b, w is [c_out, c_in]."""
    if x.value.shape[-1] != w.value.shape[1]:
        raise ShapeError(f"dense: {x.value.shape} incompatible with {w.value.shape}")
    out = Var(x.value @ w.value.T + b.value)
    xv, wv = x.value, w.value

    def vjp(up):
        gx = up @ wv if x.requires_grad else None
        gw = (up.reshape(-1, up.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])
              if w.requires_grad else None)
        gb = up.reshape(-1, up.shape[-1]).sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _record(tape, out, (x, w, b), vjp)


def relu(x: Var, tape: Optional[Tape] = None) -> Var:
    out = Var(np.maximum(x.value, 0))
    ov = out.value

    def vjp(up):
        return (up * (ov > 0),)

    return _record(tape, out, (x,), vjp)


def global_average_pool(x: Var, tape: Optional[Tape] = None, axis: int = 0) -> Var:
    """Mean over the vertex axis."""
    n = x.value.shape[axis]
    out = Var(x.value.mean(axis=axis))

    def vjp(up):
        return (np.repeat(np.expand_dims(up / n, axis), n, axis=axis),)

    return _record(tape, out, (x,), vjp)


def add(a: Var, b: Var, tape: Optional[Tape] = None) -> Var:
    out = Var(a.value + b.value)

    def vjp(up):
        return up.copy(), up.copy()

    return _record(tape, out, (a, b), vjp)


def scale(x: Var, factor: float, tape: Optional[Tape] = None) -> Var:
    out = Var(x.value * factor)

    def vjp(up):
        return (up * factor,)

    return _record(tape, out, (x,), vjp)


def shift_scale(x: Var, mul: float, addend: float, tape: Optional[Tape] = None) -> Var:
    """Constant affine transform mul * x + addend (e.g. input normalization)."""
    out = Var(x.value * mul + addend)

    def vjp(up):
        return (up * mul,)

    return _record(tape, out, (x,), vjp)


@dataclass
class BatchNormState:
    channels: int
    momentum: float = 0.1
    eps: float = 1e-5
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels, dtype=np.float64)
        if self.running_var is None:
            self.running_var = np.ones(self.channels, dtype=np.float64)


def batchnorm(x: Var, gamma: Var, beta: Var, state: BatchNormState,
              training: bool, tape: Optional[Tape] = None) -> Var:
    """Per-channel normalization; statistics pool over all leading axes.

    Training mode uses batch statistics and updates the running ones; eval
    mode uses the running statistics.
    """
    c = x.value.shape[-1]
    if c != state.channels:
        raise ShapeError(f"batchnorm: {c} channels vs state {state.channels}")
    flat = x.value.reshape(-1, c)
    n = flat.shape[0]
    if training:
        mean = flat.mean(axis=0)
        var = flat.var(axis=0)
        state.running_mean = ((1 - state.momentum) * state.running_mean
                              + state.momentum * mean)
        state.running_var = ((1 - state.momentum) * state.running_var
                             + state.momentum * var)
    else:
        mean = state.running_mean.astype(x.value.dtype)
        var = state.running_var.astype(x.value.dtype)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (flat - mean) * inv_std
    out = Var((xhat * gamma.value + beta.value).reshape(x.value.shape))

    def vjp(up):
        u = up.reshape(-1, c)
        ggamma = (u * xhat).sum(axis=0) if gamma.requires_grad else None
        gbeta = u.sum(axis=0) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = u * gamma.value
            if training:
                # d/dx of batch-statistics normalization
                gx = (inv_std / n) * (n * gxhat
                                      - gxhat.sum(axis=0)
                                      - xhat * (gxhat * xhat).sum(axis=0))
            else:
                gx = gxhat * inv_std
            gx = gx.reshape(up.shape).astype(up.dtype, copy=False)
        return gx, ggamma, gbeta

    return _record(tape, out, (x, gamma, beta), vjp)


def batchnorm_relu(x: Var, gamma: Var, beta: Var, state: BatchNormState,
                   training: bool, tape: Optional[Tape] = None) -> Var:
    """Fused batchnorm + ReLU, numerically equivalent to relu(batchnorm(x)).

    The train path runs single-pass JIT kernels; eval normalizes with the
    running statistics in plain numpy.
    """
    from . import _kernels  # deferred: numba import is heavy

    c = x.value.shape[-1]
    if c != state.channels:
        raise ShapeError(f"batchnorm_relu: {c} channels vs state {state.channels}")
    flat = np.ascontiguousarray(x.value.reshape(-1, c))
    n = flat.shape[0]
    gval = gamma.value.astype(x.value.dtype, copy=False)
    bval = beta.value.astype(x.value.dtype, copy=False)
    if training:
        out_flat = np.empty_like(flat)
        xhat = np.empty_like(flat)
        mean = np.empty(c, dtype=np.float64)
        var = np.empty(c, dtype=np.float64)
        inv_std = np.empty(c, dtype=np.float64)
        _kernels.bn_relu_forward(flat, gval, bval, out_flat, xhat,
                                 mean, var, inv_std, state.eps)
        state.running_mean = ((1 - state.momentum) * state.running_mean
                              + state.momentum * mean)
        state.running_var = ((1 - state.momentum) * state.running_var
                             + state.momentum * var)
        out = Var(out_flat.reshape(x.value.shape))

        def vjp(up):
            u = np.ascontiguousarray(up.reshape(-1, c))
            gx = np.empty_like(flat)
            ggamma = np.empty(c, dtype=flat.dtype)
            gbeta = np.empty(c, dtype=flat.dtype)
            _kernels.bn_relu_backward(u, out_flat, xhat, gval, inv_std,
                                      gx, ggamma, gbeta)
            return (gx.reshape(up.shape) if x.requires_grad else None,
                    ggamma.astype(gamma.value.dtype, copy=False),
                    gbeta.astype(beta.value.dtype, copy=False))

        return _record(tape, out, (x, gamma, beta), vjp)

    inv_std = (1.0 / np.sqrt(state.running_var + state.eps)).astype(flat.dtype)
    rmean = state.running_mean.astype(flat.dtype)
    xhat = (flat - rmean) * inv_std
    pre = xhat * gval + bval
    out_flat = np.maximum(pre, 0)
    out = Var(out_flat.reshape(x.value.shape))

    def vjp(up):
        u = up.reshape(-1, c) * (out_flat > 0)
        gx = ((u * gval * inv_std).reshape(up.shape)
              if x.requires_grad else None)
        return (gx,
                (u * xhat).sum(axis=0).astype(gamma.value.dtype, copy=False),
                u.sum(axis=0).astype(beta.value.dtype, copy=False))

    return _record(tape, out, (x, gamma, beta), vjp)


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_op(x: Var, tape: Optional[Tape] = None) -> Var:
    """Softmax over the last axis as a tape primitive."""
    p = softmax(x.value)
    out = Var(p)

    def vjp(up):
        return (p * (up - (up * p).sum(axis=-1, keepdims=True)),)

    return _record(tape, out, (x,), vjp)


def nll_from_probs(probs: Var, labels, tape: Optional[Tape] = None) -> Var:
    """Mean negative log-likelihood of already-normalized probabilities."""
    p = probs.value
    single = p.ndim == 1
    if single:
        p = p[None, :]
        labels = np.array([labels])
    labels = np.asarray(labels)
    n = p.shape[0]
    picked = np.maximum(p[np.arange(n), labels], 1e-30)
    out = Var(np.asarray(-np.log(picked).mean(), dtype=p.dtype))

    def vjp(up):
        g = np.zeros_like(p)
        g[np.arange(n), labels] = -float(up) / (n * picked)
        return (g[0] if single else g,)

    return _record(tape, out, (probs,), vjp)


def softmax_cross_entropy(logits: Var, labels, tape: Optional[Tape] = None) -> Var:
    """Mean cross-entropy over the leading axis; labels are integer classes.

    Accepts a single logit vector [k] with a scalar label as well.
    """
    z = logits.value
    single = z.ndim == 1
    if single:
        z = z[None, :]
        labels = np.array([labels])
    labels = np.asarray(labels)
    n = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    per_sample = logsumexp - z[np.arange(n), labels]
    out = Var(np.asarray(per_sample.mean(), dtype=z.dtype))

    def vjp(up):
        p = softmax(z)
        p[np.arange(n), labels] -= 1.0
        g = (float(up) / n) * p
        if single:
            g = g[0]
        return (g.astype(z.dtype, copy=False),)

    return _record(tape, out, (logits,), vjp)


# ----------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params, grads, state: OptimizerState, lr: Optional[float] = None):
    """One AdamW update with decoupled weight decay.

    The step counter increments before bias correction; decay multiplies the
    parameter directly, independent of the adaptive term.
    """
    if lr is None:
        lr = state.lr
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.value)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.value = p.value - lr * (mhat / (np.sqrt(vhat) + state.eps)
                                  + state.weight_decay * p.value)


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to base_lr, then cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    t = (step - warmup_steps) / (total_steps - warmup_steps)
    t = min(max(t, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))
