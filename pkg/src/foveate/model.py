"""Sequential foveated classifier: sample, extract, attend, repeat.

Each fixation step samples the image through the lattice, runs the
gconv/BN/ReLU feature extractor, pools and classifies; the attention head
turns the final per-vertex feature map into the next fixation. Per-step
logits are averaged (pre-softmax by default) and the cross-entropy loss on
that average backpropagates through every step, including the fixation
coordinates themselves.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import nn
from .attention import AttentionHead, attend
from .gconv import AggregationPlan, GConvLayer, gconv_apply, init_layer
from .graph import build_graph, evaluate_basis
from .lattice import LatticeSpec, SamplingLattice, sunflower_lattice, uniform_lattice
from .nn import (BatchNormState, OptimizerState, Tape, Var, adamw_step,
                 batchnorm_relu, constant, dense, global_average_pool, lr_at,
                 parameter, scale, shift_scale)

MNIST_MEAN = 0.1307
MNIST_STD = 0.3081
CHECKPOINT_MAGIC = b"FOVMODL1"


class ModelError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    lattice_kind: str = "sunflower"      # sunflower | uniform
    n_points: int = 784
    fovea_points: int = 256
    fovea_radius: float = 0.4
    field_radius_px: float = 112.0
    grid_width: int = 28
    grid_height: int = 28
    extent: float = 1.0
    n_layers: int = 4
    channels: int = 64
    k: int = 9
    sigma: float = 1.0
    max_order: int = 2
    n_classes: int = 10
    t: int = 3
    policy: str = "learned"              # learned | random | center
    image_size: int = 224
    padding: str = "border"              # border | zero
    average_probs: bool = False
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.t < 1:
            raise ModelError("t must be >= 1")
        if self.policy not in ("learned", "random", "center"):
            raise ModelError(f"unknown policy {self.policy!r}")
        if self.k > self.n_points:
            raise ModelError("k must not exceed the lattice point count")


@dataclass
class FixationTrace:
    """Per-step fixations [T, B, 2] and logits [T, B, n_classes]."""

    fixations: np.ndarray
    logits: np.ndarray


def _derive_seed(base: int, stream: int) -> int:
    return int(np.random.SeedSequence([base, stream]).generate_state(1)[0])


def _build_lattice(cfg: ModelConfig) -> SamplingLattice:
    if cfg.lattice_kind == "sunflower":
        return sunflower_lattice(LatticeSpec(
            kind="sunflower", n_points=cfg.n_points,
            fovea_points=cfg.fovea_points, fovea_radius=cfg.fovea_radius,
            field_radius_px=cfg.field_radius_px))
    if cfg.lattice_kind == "uniform":
        return uniform_lattice(cfg.grid_width, cfg.grid_height, cfg.extent,
                               cfg.field_radius_px)
    raise ModelError(f"unsupported lattice kind {cfg.lattice_kind!r}")


# ------------------------------------------------ batched sampler primitives

def sample_batch(images, base_points, fixation: Var, tape=None,
                 padding="border") -> Var:
    """Bilinear samples of a batch of single-channel images.

    images: [B, H, W] (constant); base_points: [n, 2] pixel-scale offsets;
    fixation: Var [B, 2]. Returns [n, B, 1] features; the VJP reaches the
    fixation through the interpolant's derivative, zero where clamped.
    """
    b, h, w = images.shape
    fx = fixation.value
    x = base_points[:, 0][:, None] + fx[:, 0][None, :]      # [n, B]
    y = base_points[:, 1][:, None] + fx[:, 1][None, :]
    dtype = images.dtype
    if padding == "border":
        xc = np.clip(x, 0.0, w - 1.0)
        yc = np.clip(y, 0.0, h - 1.0)
        mx = ((x > 0.0) & (x < w - 1.0)).astype(dtype)
        my = ((y > 0.0) & (y < h - 1.0)).astype(dtype)
    elif padding == "zero":
        xc, yc = x, y
        mx = my = None
    else:
        raise ModelError(f"unknown padding {padding!r}")

    x0 = np.floor(xc)
    y0 = np.floor(yc)
    fxp = (xc - x0).astype(dtype)
    fyp = (yc - y0).astype(dtype)
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)
    x1i, y1i = x0i + 1, y0i + 1
    if padding == "border":
        x0i = np.clip(x0i, 0, w - 1)
        x1i = np.clip(x1i, 0, w - 1)
        y0i = np.clip(y0i, 0, h - 1)
        y1i = np.clip(y1i, 0, h - 1)
        valid = (None, None, None, None)
    else:
        def inside(xi, yi):
            return ((xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)).astype(dtype)
        valid = (inside(x0i, y0i), inside(x1i, y0i),
                 inside(x0i, y1i), inside(x1i, y1i))
        x0i = np.clip(x0i, 0, w - 1)
        x1i = np.clip(x1i, 0, w - 1)
        y0i = np.clip(y0i, 0, h - 1)
        y1i = np.clip(y1i, 0, h - 1)

    flat = images.reshape(b, h * w)
    cols = np.arange(b)[None, :]

    def corner(yi, xi, v):
        vals = flat[cols, yi * w + xi]
        return vals if v is None else vals * v

    v00 = corner(y0i, x0i, valid[0])
    v10 = corner(y0i, x1i, valid[1])
    v01 = corner(y1i, x0i, valid[2])
    v11 = corner(y1i, x1i, valid[3])
    top = v00 * (1.0 - fxp) + v10 * fxp
    bot = v01 * (1.0 - fxp) + v11 * fxp
    out = Var((top * (1.0 - fyp) + bot * fyp)[:, :, None])

    def vjp(up):
        u = up[:, :, 0]
        dvx = (1.0 - fyp) * (v10 - v00) + fyp * (v11 - v01)
        dvy = (1.0 - fxp) * (v01 - v00) + fxp * (v11 - v10)
        gx = u * dvx
        gy = u * dvy
        if mx is not None:
            gx = gx * mx
            gy = gy * my
        return (np.stack([gx.sum(axis=0), gy.sum(axis=0)], axis=1),)

    return nn._record(tape, out, (fixation,), vjp)


def translate_points(base_points, fixation: Var, tape=None) -> Var:
    """Absolute vertex positions [n, B, 2] = base + per-batch fixation."""
    out = Var(base_points[:, None, :] + fixation.value[None, :, :])

    def vjp(up):
        return (up.sum(axis=0),)

    return nn._record(tape, out, (fixation,), vjp)


# ------------------------------------------------------------------ the model

class FoveatedClassifier:
    """A.5-style extractor (n_layers x channels gconv/BN/ReLU) + GAP head +
    expectation attention, run for T fixations."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.lattice = _build_lattice(config)
        self.base_points = np.ascontiguousarray(
            self.lattice.positions * config.field_radius_px).astype(self.dtype)
        pos = self.lattice.positions * config.field_radius_px
        self.graph = build_graph(pos, pos, config.k)
        self.basis = evaluate_basis(self.graph, config.sigma, config.max_order)
        plan = AggregationPlan(self.graph, self.basis, self.dtype)

        self.layers = []
        self.bn_states = []
        self.bn_params = []
        c_in = 1
        for i in range(config.n_layers):
            layer = init_layer(c_in, config.channels, self.graph, self.basis,
                               seed=_derive_seed(config.seed, i), dtype=self.dtype,
                               plan=plan)
            self.layers.append(layer)
            self.bn_states.append(BatchNormState(config.channels))
            gamma = parameter(np.ones(config.channels, dtype=self.dtype))
            beta = parameter(np.zeros(config.channels, dtype=self.dtype))
            self.bn_params.append((gamma, beta))
            c_in = config.channels

        rng = np.random.default_rng(_derive_seed(config.seed, 100))
        self.head_w = parameter(rng.normal(
            0.0, np.sqrt(1.0 / config.channels),
            size=(config.n_classes, config.channels)).astype(self.dtype))
        self.head_b = parameter(np.zeros(config.n_classes, dtype=self.dtype))
        self.attention = AttentionHead(config.channels,
                                       seed=_derive_seed(config.seed, 200),
                                       dtype=self.dtype)

    # parameter order defines the checkpoint blob order
    def named_params(self):
        out = []
        for i, layer in enumerate(self.layers):
            gamma, beta = self.bn_params[i]
            out += [(f"layer{i}.weights", layer.weights),
                    (f"layer{i}.bias", layer.bias),
                    (f"layer{i}.bn_gamma", gamma),
                    (f"layer{i}.bn_beta", beta)]
        out += [("head.weights", self.head_w), ("head.bias", self.head_b),
                ("attention.weights", self.attention.w),
                ("attention.bias", self.attention.b)]
        return out

    @property
    def params(self):
        return [p for _, p in self.named_params()]

    def center_fixation(self, batch: int) -> np.ndarray:
        c = (self.config.image_size - 1) / 2.0
        return np.full((batch, 2), c, dtype=self.dtype)

    def _extract(self, feats: Var, training: bool, tape) -> Var:
        h = feats
        for layer, state, (gamma, beta) in zip(self.layers, self.bn_states,
                                               self.bn_params):
            h = gconv_apply(layer, h, tape)
            h = batchnorm_relu(h, gamma, beta, state, training, tape)
        return h

    def forward(self, images, t: Optional[int] = None, training: bool = False,
                tape: Optional[Tape] = None, rng: Optional[np.random.Generator] = None):
        """Run the T-step fixation loop on a batch of images.

        images: [B, H, W] in [0, 1]. Returns (avg_logits Var [B, n_classes],
        FixationTrace). Step 0 always fixates the image center.
        """
        cfg = self.config
        t = cfg.t if t is None else t
        images = np.ascontiguousarray(images, dtype=self.dtype)
        if images.ndim == 2:
            images = images[None]
        b = images.shape[0]
        if images.shape[1] != cfg.image_size or images.shape[2] != cfg.image_size:
            raise ModelError(f"expected {cfg.image_size}^2 images, got {images.shape}")
        if cfg.policy == "random" and rng is None:
            rng = np.random.default_rng(_derive_seed(cfg.seed, 300))

        fix = constant(self.center_fixation(b))
        fixations = np.zeros((t, b, 2), dtype=np.float64)
        step_logits = []
        pred_sum = None
        for step in range(t):
            fixations[step] = fix.value
            feats = sample_batch(images, self.base_points, fix, tape, cfg.padding)
            feats = shift_scale(feats, 1.0 / MNIST_STD, -MNIST_MEAN / MNIST_STD, tape)
            h = self._extract(feats, training, tape)
            pooled = global_average_pool(h, tape, axis=0)
            logits = dense(pooled, self.head_w, self.head_b, tape)
            step_logits.append(logits)
            term = nn.softmax_op(logits, tape) if cfg.average_probs else logits
            pred_sum = term if pred_sum is None else nn.add(pred_sum, term, tape)
            if step < t - 1:
                if cfg.policy == "learned":
                    positions = translate_points(self.base_points, fix, tape)
                    fix = attend(self.attention, h, positions, tape)
                elif cfg.policy == "center":
                    fix = constant(self.center_fixation(b))
                else:
                    rand = np.stack([
                        rng.uniform(0.0, cfg.image_size - 1.0, b),
                        rng.uniform(0.0, cfg.image_size - 1.0, b)], axis=1)
                    fix = constant(rand.astype(self.dtype))
        prediction = scale(pred_sum, 1.0 / t, tape)
        trace = FixationTrace(
            fixations=fixations,
            logits=np.stack([s.value for s in step_logits]).astype(np.float64))
        return prediction, trace

    def loss(self, prediction: Var, labels, tape: Optional[Tape] = None) -> Var:
        """Cross-entropy on the averaged prediction.

        With average_probs the prediction is an averaged probability vector
        and the loss is its negative log-likelihood; otherwise it is averaged
        logits under the standard softmax cross-entropy.
        """
        if self.config.average_probs:
            return nn.nll_from_probs(prediction, labels, tape)
        return nn.softmax_cross_entropy(prediction, labels, tape)

    def predict(self, images, t=None, rng=None):
        prediction, trace = self.forward(images, t=t, training=False, rng=rng)
        return prediction.value.argmax(axis=1), trace


# -------------------------------------------------------------- training loop

@dataclass
class TrainSettings:
    epochs: int = 20
    batch_size: int = 64
    base_lr: float = 3e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    warmup_epochs: int = 5
    shuffle_seed: Optional[int] = None
    eval_batch_size: int = 256


@dataclass
class TrainResult:
    metrics: list                      # dict rows: epoch, step, lr, train_loss, val_acc
    best_val_acc: float
    best_epoch: int


def _snapshot(model):
    params = [p.value.copy() for p in model.params]
    bn = [(s.running_mean.copy(), s.running_var.copy()) for s in model.bn_states]
    return params, bn


def _restore(model, snap):
    params, bn = snap
    for p, v in zip(model.params, params):
        p.value = v.copy()
    for s, (m, v) in zip(model.bn_states, bn):
        s.running_mean = m.copy()
        s.running_var = v.copy()


def train(model: FoveatedClassifier, train_ds, val_ds,
          settings: TrainSettings = None, log=None) -> TrainResult:
    """AdamW + warmup/cosine training; keeps the best-validation checkpoint.

    The model is left holding the best-validation parameters (and matching
    batch-norm running statistics). Aborts on non-finite loss.
    """
    from .data import batches  # local import to avoid a cycle

    s = settings or TrainSettings()
    cfg = model.config
    shuffle_seed = cfg.seed if s.shuffle_seed is None else s.shuffle_seed
    n = len(train_ds)
    steps_per_epoch = (n + s.batch_size - 1) // s.batch_size
    total_steps = s.epochs * steps_per_epoch
    warmup_steps = s.warmup_epochs * steps_per_epoch
    opt = OptimizerState(lr=s.base_lr, betas=s.betas, eps=s.eps,
                         weight_decay=s.weight_decay)
    policy_rng = np.random.default_rng(_derive_seed(cfg.seed, 301))

    metrics = []
    best = (-1.0, -1, None)
    step = 0
    for epoch in range(s.epochs):
        losses = []
        for images, labels in batches(train_ds, s.batch_size,
                                      shuffle_seed=shuffle_seed, epoch=epoch):
            tape = Tape()
            avg_logits, _ = model.forward(images, training=True, tape=tape,
                                          rng=policy_rng)
            loss = model.loss(avg_logits, labels, tape)
            if not np.isfinite(loss.value):
                raise RuntimeError(
                    f"non-finite loss {loss.value!r} at epoch {epoch} step {step}")
            for p in model.params:
                p.grad = None
            tape.backward(loss)
            lr = lr_at(step, total_steps, warmup_steps, s.base_lr)
            adamw_step(model.params, [p.grad for p in model.params], opt, lr=lr)
            losses.append(float(loss.value))
            step += 1
        val = evaluate(model, val_ds, batch_size=s.eval_batch_size)
        row = {"epoch": epoch, "step": step,
               "lr": lr_at(step, total_steps, warmup_steps, s.base_lr),
               "train_loss": float(np.mean(losses)), "val_acc": val["accuracy"]}
        metrics.append(row)
        if log:
            log(row)
        if val["accuracy"] > best[0]:
            best = (val["accuracy"], epoch, _snapshot(model))
    if best[2] is not None:
        _restore(model, best[2])
    return TrainResult(metrics=metrics, best_val_acc=best[0], best_epoch=best[1])


def evaluate(model: FoveatedClassifier, dataset, batch_size: int = 256,
             t: Optional[int] = None, policy: Optional[str] = None) -> dict:
    """Accuracy, per-class accuracy, and the mean fixation trace.

    ``t`` and ``policy`` override the configured values at evaluation time
    (the sequential loop accepts any fixation budget).
    """
    from .data import batches

    cfg = model.config
    old_policy = cfg.policy
    if policy is not None:
        cfg.policy = policy
    try:
        t_eval = cfg.t if t is None else t
        rng = np.random.default_rng(_derive_seed(cfg.seed, 400))
        correct = np.zeros(cfg.n_classes, dtype=np.int64)
        totals = np.zeros(cfg.n_classes, dtype=np.int64)
        trace_sum = np.zeros((t_eval, 2))
        n_seen = 0
        for images, labels in batches(dataset, batch_size):
            preds, trace = model.predict(images, t=t_eval, rng=rng)
            for cls in range(cfg.n_classes):
                mask = labels == cls
                totals[cls] += mask.sum()
                correct[cls] += (preds[mask] == cls).sum()
            trace_sum += trace.fixations.mean(axis=1) * len(labels)
            n_seen += len(labels)
    finally:
        cfg.policy = old_policy
    per_class = np.where(totals > 0, correct / np.maximum(totals, 1), np.nan)
    return {"accuracy": float(correct.sum() / max(n_seen, 1)),
            "per_class": per_class, "mean_trace": trace_sum / max(n_seen, 1),
            "count": int(n_seen)}


# ----------------------------------------------------------- checkpoint format

def save(model: FoveatedClassifier, path):
    """Versioned binary: 8-byte magic, JSON header, float32 LE blobs."""
    named = model.named_params()
    header = {
        "config": asdict(model.config),
        "params": [[name, list(p.value.shape)] for name, p in named],
        "bn_layers": len(model.bn_states),
    }
    hjson = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(hjson)))
        fh.write(hjson)
        for _, p in named:
            fh.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
        for state in model.bn_states:
            fh.write(np.ascontiguousarray(state.running_mean, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(state.running_var, dtype="<f4").tobytes())


def load(path) -> FoveatedClassifier:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    config = ModelConfig(**header["config"])
    model = FoveatedClassifier(config)
    named = model.named_params()
    if [[name, list(p.value.shape)] for name, p in named] != header["params"]:
        raise CheckpointError(f"{path}: header shapes do not match the config")
    offset = 12 + hlen
    n_param_floats = sum(int(np.prod(p.value.shape)) for _, p in named)
    n_bn_floats = 2 * header["bn_layers"] * model.config.channels
    expected = offset + 4 * (n_param_floats + n_bn_floats)
    if len(raw) != expected:
        raise CheckpointError(
            f"{path}: blob length {len(raw) - offset} does not match header "
            f"({expected - offset} expected)")
    for _, p in named:
        count = int(np.prod(p.value.shape))
        vals = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        p.value = vals.reshape(p.value.shape).astype(model.dtype)
        offset += 4 * count
    for state in model.bn_states:
        c = model.config.channels
        state.running_mean = np.frombuffer(raw, "<f4", c, offset).astype(np.float64)
        offset += 4 * c
        state.running_var = np.frombuffer(raw, "<f4", c, offset).astype(np.float64)
        offset += 4 * c
    return model
