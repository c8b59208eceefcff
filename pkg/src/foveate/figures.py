"""Matplotlib renderings that accompany the CLI's delimited outputs."""

from __future__ import annotations

import numpy as np
import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
from PIL import Image as PILImage  # noqa: E402


def load_image(path) -> np.ndarray:
    """PNG/PGM/... to float [H, W] or [H, W, C] in [0, 1]."""
    img = PILImage.open(path)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return arr / 255.0


def save_image(array, path):
    arr = np.asarray(array)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    arr = np.clip(arr, 0.0, 1.0)
    PILImage.fromarray((arr * 255.0).round().astype(np.uint8)).save(path)


def lattice_scatter(lattice, path, title=None):
    fig, ax = plt.subplots(figsize=(5, 5))
    pos = lattice.positions
    ax.scatter(pos[:, 0], pos[:, 1], s=2.0, c="black", linewidths=0)
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def training_curves(metrics, path):
    """metrics: rows with epoch / train_loss / val_acc."""
    epochs = [row["epoch"] for row in metrics]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(epochs, [row["train_loss"] for row in metrics], "-o", ms=3,
             color="tab:blue", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [row["val_acc"] for row in metrics], "-s", ms=3,
             color="tab:red", label="val accuracy")
    ax2.set_ylabel("val accuracy", color="tab:red")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def trace_overlay(image, fixations, path, pred=None, label=None):
    """Fixation path drawn over the input image."""
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(np.asarray(image), cmap="gray", interpolation="nearest")
    fx = np.asarray(fixations)
    ax.plot(fx[:, 0], fx[:, 1], "-o", color="tab:red", ms=5, lw=1.5)
    for i, (x, y) in enumerate(fx):
        ax.annotate(str(i), (x, y), color="tab:orange", fontsize=9,
                    xytext=(3, 3), textcoords="offset points")
    parts = []
    if pred is not None:
        parts.append(f"pred {pred}")
    if label is not None:
        parts.append(f"label {label}")
    if parts:
        ax.set_title(", ".join(parts))
    ax.set_xlim(-0.5, np.asarray(image).shape[1] - 0.5)
    ax.set_ylim(np.asarray(image).shape[0] - 0.5, -0.5)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def per_class_bar(per_class, path):
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(np.arange(len(per_class)), per_class, color="tab:blue")
    ax.set_xlabel("class")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
