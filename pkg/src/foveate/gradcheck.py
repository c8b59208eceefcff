"""Central finite-difference verification of every differentiable primitive.

Each check builds random double-precision instances, contracts the primitive
output against a fixed upstream vector to get a scalar, and compares the
recorded VJP against central differences on a random subset of coordinates.
A coordinate passes when |ad - fd| <= rtol * max(|ad|, |fd|) + atol; the
absolute floor absorbs true-zero gradients, where the relative error of
finite-difference noise is meaningless.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import nn
from .attention import AttentionHead, attend
from .gconv import gconv_vjp, init_layer
from .graph import build_graph, evaluate_basis
from .lattice import LatticeSpec, sunflower_lattice
from .model import FoveatedClassifier, ModelConfig
from .nn import BatchNormState, Tape, Var
from .sampler import Fixation, Image, sample, sample_vjp

DEFAULT_RTOL = 1e-4
ATOL = 1e-8


@dataclass
class CheckResult:
    name: str
    instances: int
    checks: int
    max_rel: float
    passed: bool
    seconds: float

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"{self.name:<12} {status}  instances={self.instances:<4} "
                f"coords={self.checks:<6} max_rel={self.max_rel:.3e} "
                f"({self.seconds:.1f}s)")


class _Tracker:
    def __init__(self, rtol):
        self.rtol = rtol
        self.max_rel = 0.0
        self.checks = 0
        self.ok = True

    def compare(self, ad, fd):
        self.checks += 1
        err = abs(ad - fd)
        tol = self.rtol * max(abs(ad), abs(fd)) + ATOL
        if err > tol:
            self.ok = False
        denom = max(abs(ad), abs(fd))
        if denom > 1e-6:
            self.max_rel = max(self.max_rel, err / denom)


def _fd_scalar(f, arr, idx, h=1e-5):
    orig = arr.flat[idx]
    arr.flat[idx] = orig + h
    lp = f()
    arr.flat[idx] = orig - h
    lm = f()
    arr.flat[idx] = orig
    return (lp - lm) / (2 * h)


def _spot_indices(rng, arr, n=4):
    size = arr.size
    return rng.choice(size, size=min(n, size), replace=False)


def check_sampler(n_instances=100, rtol=DEFAULT_RTOL, seed=0) -> CheckResult:
    """Bilinear sampling VJPs w.r.t. both the image and the fixation."""
    rng = np.random.default_rng(seed)
    t0 = time.time()
    tr = _Tracker(rtol)
    for _ in range(n_instances):
        h, w = rng.integers(6, 12, size=2)
        img = Image(rng.random((h, w, int(rng.integers(1, 3)))))
        n_pts = 20
        # keep taps strictly interior and away from integer grid lines
        spec = LatticeSpec(kind="sunflower", n_points=n_pts, fovea_points=5,
                           fovea_radius=0.5, field_radius_px=min(h, w) / 4.0)
        lat = sunflower_lattice(spec)
        fix = Fixation(w / 2 + rng.uniform(0.13, 0.37), h / 2 + rng.uniform(0.13, 0.37))
        up = rng.standard_normal((n_pts, img.channels))

        def loss():
            return float((sample(img, lat, fix).features * up).sum())

        g_img, g_fix = sample_vjp(img, lat, fix, up)
        for axis in (0, 1):
            # finite differences on the fixation coordinates
            h_step = 1e-5
            coords = [fix.x, fix.y]
            coords[axis] += h_step
            lp = float((sample(img, lat, Fixation(*coords)).features * up).sum())
            coords[axis] -= 2 * h_step
            lm = float((sample(img, lat, Fixation(*coords)).features * up).sum())
            tr.compare(g_fix[axis], (lp - lm) / (2 * h_step))
        for idx in _spot_indices(rng, img.data):
            tr.compare(g_img.flat[idx], _fd_scalar(loss, img.data, idx))
    return CheckResult("sampler", n_instances, tr.checks, tr.max_rel, tr.ok,
                       time.time() - t0)


def check_gconv(n_instances=100, rtol=DEFAULT_RTOL, seed=1) -> CheckResult:
    rng = np.random.default_rng(seed)
    t0 = time.time()
    tr = _Tracker(rtol)
    for _ in range(n_instances):
        n_in = int(rng.integers(8, 24))
        n_out = int(rng.integers(4, 12))
        k = int(rng.integers(2, min(6, n_in)))
        g = build_graph(rng.random((n_in, 2)), rng.random((n_out, 2)), k)
        basis = evaluate_basis(g, sigma=1.0, max_order=int(rng.integers(0, 3)))
        c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        layer = init_layer(c_in, c_out, g, basis, seed=int(rng.integers(1 << 30)),
                           dtype=np.float64)
        feats = rng.standard_normal((n_in, c_in))
        up = rng.standard_normal((n_out, c_out))
        gf, gw, gb = gconv_vjp(layer, feats, up)

        from .gconv import gconv_forward

        def loss():
            return float((gconv_forward(layer, feats) * up).sum())

        for idx in _spot_indices(rng, feats):
            tr.compare(gf.flat[idx], _fd_scalar(loss, feats, idx))
        for idx in _spot_indices(rng, layer.weights.value):
            tr.compare(gw.flat[idx], _fd_scalar(loss, layer.weights.value, idx))
        for idx in _spot_indices(rng, layer.bias.value, 2):
            tr.compare(gb.flat[idx], _fd_scalar(loss, layer.bias.value, idx))
    return CheckResult("gconv", n_instances, tr.checks, tr.max_rel, tr.ok,
                       time.time() - t0)


def _check_tape_primitive(name, builder, n_instances, rtol, seed) -> CheckResult:
    """Generic FD check: builder(rng) -> (inputs list[Var], forward callable)."""
    rng = np.random.default_rng(seed)
    t0 = time.time()
    tr = _Tracker(rtol)
    for _ in range(n_instances):
        inputs, forward = builder(rng)
        tape = Tape()
        out = forward(tape)
        up = rng.standard_normal(out.value.shape)

        def loss():
            return float((forward(None).value * up).sum())

        tape.backward(out, up)
        for v in inputs:
            grad = v.grad if v.grad is not None else np.zeros_like(v.value)
            for idx in _spot_indices(rng, v.value, 3):
                tr.compare(grad.flat[idx], _fd_scalar(loss, v.value, idx))
            v.grad = None
    return CheckResult(name, n_instances, tr.checks, tr.max_rel, tr.ok,
                       time.time() - t0)


def check_dense(n_instances=100, rtol=DEFAULT_RTOL, seed=2) -> CheckResult:
    def builder(rng):
        n, ci, co = rng.integers(2, 8), rng.integers(1, 6), rng.integers(1, 6)
        x = Var(rng.standard_normal((n, ci)), requires_grad=True)
        w = Var(rng.standard_normal((co, ci)), requires_grad=True)
        b = Var(rng.standard_normal(co), requires_grad=True)
        return [x, w, b], lambda tape: nn.dense(x, w, b, tape)
    return _check_tape_primitive("dense", builder, n_instances, rtol, seed)


def check_relu(n_instances=100, rtol=DEFAULT_RTOL, seed=3) -> CheckResult:
    def builder(rng):
        x = rng.standard_normal((rng.integers(2, 10), rng.integers(1, 6)))
        x = np.where(np.abs(x) < 0.05, 0.5, x)   # stay away from the kink
        xv = Var(x, requires_grad=True)
        return [xv], lambda tape: nn.relu(xv, tape)
    return _check_tape_primitive("relu", builder, n_instances, rtol, seed)


def check_batchnorm(n_instances=100, rtol=DEFAULT_RTOL, seed=4) -> CheckResult:
    def builder(rng):
        n, c = int(rng.integers(4, 16)), int(rng.integers(1, 6))
        x = Var(rng.standard_normal((n, c)) * 2 + rng.standard_normal(c),
                requires_grad=True)
        g = Var(rng.standard_normal(c) + 1.5, requires_grad=True)
        b = Var(rng.standard_normal(c), requires_grad=True)
        training = bool(rng.integers(0, 2))
        state = BatchNormState(c)
        state.running_mean = rng.standard_normal(c)
        state.running_var = rng.random(c) + 0.5
        # train mode: the loss uses batch stats, so running-stat updates
        # during FD re-evaluation are irrelevant; eval mode never updates.
        return [x, g, b], lambda tape: nn.batchnorm(x, g, b, state, training, tape)
    return _check_tape_primitive("batchnorm", builder, n_instances, rtol, seed)


def check_gap(n_instances=100, rtol=DEFAULT_RTOL, seed=5) -> CheckResult:
    def builder(rng):
        x = Var(rng.standard_normal((rng.integers(1, 10), rng.integers(1, 6))),
                requires_grad=True)
        return [x], lambda tape: nn.global_average_pool(x, tape)
    return _check_tape_primitive("gap", builder, n_instances, rtol, seed)


def check_attention(n_instances=100, rtol=DEFAULT_RTOL, seed=6) -> CheckResult:
    def builder(rng):
        n, c = int(rng.integers(3, 12)), int(rng.integers(1, 6))
        head = AttentionHead(c, seed=int(rng.integers(1 << 30)), dtype=np.float64)
        f = Var(rng.standard_normal((n, c)), requires_grad=True)
        p = Var(rng.standard_normal((n, 2)) * 5, requires_grad=True)
        return ([f, p, head.w, head.b],
                lambda tape: attend(head, f, p, tape))
    return _check_tape_primitive("attention", builder, n_instances, rtol, seed)


def check_loss(n_instances=100, rtol=DEFAULT_RTOL, seed=7) -> CheckResult:
    def builder(rng):
        n, k = int(rng.integers(1, 8)), int(rng.integers(2, 11))
        logits = Var(rng.standard_normal((n, k)), requires_grad=True)
        labels = rng.integers(0, k, size=n)
        return [logits], lambda tape: nn.softmax_cross_entropy(logits, labels, tape)
    return _check_tape_primitive("loss", builder, n_instances, rtol, seed)


def check_end_to_end(rtol=1e-3, seed=8, coords_per_param=4) -> CheckResult:
    """Tiny full model, T=2, learned policy: every parameter vs FD."""
    rng = np.random.default_rng(seed)
    t0 = time.time()
    tr = _Tracker(rtol)
    cfg = ModelConfig(n_points=30, fovea_points=8, k=4, channels=8, n_layers=2,
                      t=2, image_size=16, field_radius_px=7.0, seed=11,
                      dtype="float64")
    m = FoveatedClassifier(cfg)
    imgs = rng.random((2, 16, 16))
    labels = np.array([3, 7])

    def loss_value():
        pred, _ = m.forward(imgs, training=True)
        return float(m.loss(pred, labels).value)

    tape = Tape()
    pred, _ = m.forward(imgs, training=True, tape=tape)
    loss = m.loss(pred, labels, tape)
    for p in m.params:
        p.grad = None
    tape.backward(loss)
    for name, p in m.named_params():
        grad = p.grad if p.grad is not None else np.zeros_like(p.value)
        for idx in _spot_indices(rng, p.value, coords_per_param):
            tr.compare(grad.flat[idx], _fd_scalar(loss_value, p.value, idx))
    return CheckResult("end_to_end", 1, tr.checks, tr.max_rel, tr.ok,
                       time.time() - t0)


ALL_CHECKS = {
    "sampler": check_sampler,
    "gconv": check_gconv,
    "dense": check_dense,
    "relu": check_relu,
    "batchnorm": check_batchnorm,
    "gap": check_gap,
    "attention": check_attention,
    "loss": check_loss,
}


def run_all(n_instances=100, rtol=DEFAULT_RTOL, only=None, end_to_end=True):
    results = []
    for name, fn in ALL_CHECKS.items():
        if only and name != only:
            continue
        results.append(fn(n_instances=n_instances, rtol=rtol))
    if end_to_end and (only in (None, "end_to_end")):
        results.append(check_end_to_end())
    return results
