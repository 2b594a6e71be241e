"""Procedural 10-class image dataset and source model training.

No external benchmark is downloaded; instead each class is a parametric
shape or texture rendered with random colors, positions, scales and a
little pixel noise.  The classes stay separable for a small CNN while
remaining sensitive to noise and blur corruptions.

Class map:
  0 disk          1 ring        2 square       3 cross       4 h-stripes
  5 v-stripes     6 d-stripes   7 checkerboard 8 twin disks  9 triangle
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .models import SplitModel, build_model, save_checkpoint

NUM_CLASSES = 10
CLASS_NAMES = (
    "disk",
    "ring",
    "square",
    "cross",
    "h_stripes",
    "v_stripes",
    "d_stripes",
    "checkerboard",
    "twin_disks",
    "triangle",
)


def _coords(size: int, rng: np.random.Generator, max_jitter: float = 0.22):
    """Centered, rotated, jittered coordinate grids in [-1, 1]."""
    lin = np.linspace(-1.0, 1.0, size)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    cx, cy = rng.uniform(-max_jitter, max_jitter, size=2)
    angle = rng.uniform(-0.26, 0.26)  # about +-15 degrees
    ca, sa = np.cos(angle), np.sin(angle)
    u = (xx - cx) * ca + (yy - cy) * sa
    v = -(xx - cx) * sa + (yy - cy) * ca
    return u, v


def _mask(cls: int, size: int, rng: np.random.Generator) -> np.ndarray:
    u, v = _coords(size, rng)
    r = np.sqrt(u**2 + v**2)
    if cls == 0:  # disk
        return (r < rng.uniform(0.42, 0.6)).astype(np.float64)
    if cls == 1:  # ring
        outer = rng.uniform(0.52, 0.68)
        return ((r < outer) & (r > outer - rng.uniform(0.18, 0.24))).astype(np.float64)
    if cls == 2:  # square
        s = rng.uniform(0.38, 0.52)
        return ((np.abs(u) < s) & (np.abs(v) < s)).astype(np.float64)
    if cls == 3:  # cross
        w = rng.uniform(0.12, 0.2)
        L = rng.uniform(0.55, 0.75)
        return (((np.abs(u) < w) & (np.abs(v) < L)) | ((np.abs(v) < w) & (np.abs(u) < L))).astype(
            np.float64
        )
    if cls == 4:  # horizontal stripes
        f = rng.uniform(2.0, 3.5)
        return (np.sin(np.pi * f * v + rng.uniform(0, np.pi)) > 0).astype(np.float64)
    if cls == 5:  # vertical stripes
        f = rng.uniform(2.0, 3.5)
        return (np.sin(np.pi * f * u + rng.uniform(0, np.pi)) > 0).astype(np.float64)
    if cls == 6:  # diagonal stripes
        f = rng.uniform(2.0, 3.5)
        return (np.sin(np.pi * f * (u + v) * 0.7071 + rng.uniform(0, np.pi)) > 0).astype(
            np.float64
        )
    if cls == 7:  # checkerboard
        f = rng.uniform(1.6, 2.6)
        return (
            np.sign(np.sin(np.pi * f * u + rng.uniform(0, np.pi)))
            * np.sign(np.sin(np.pi * f * v + rng.uniform(0, np.pi)))
            > 0
        ).astype(np.float64)
    if cls == 8:  # twin disks
        rad = rng.uniform(0.2, 0.28)
        sep = rng.uniform(0.45, 0.6)
        d1 = np.sqrt((u - sep / 2) ** 2 + v**2) < rad
        d2 = np.sqrt((u + sep / 2) ** 2 + v**2) < rad
        return (d1 | d2).astype(np.float64)
    if cls == 9:  # triangle (upward, half-plane intersections)
        s = rng.uniform(0.5, 0.7)
        return ((v < s * 0.6) & (v > -s + 1.8 * np.abs(u))).astype(np.float64)
    raise ValueError(f"unknown class {cls}")


def render_image(cls: int, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    bg = rng.uniform(0.05, 0.45, size=3)
    fg = rng.uniform(0.55, 0.95, size=3)
    if rng.random() < 0.5:
        bg, fg = fg, bg
    mask = _mask(cls, size, rng)[..., None]
    img = bg[None, None, :] * (1 - mask) + fg[None, None, :] * mask
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_dataset(
    num_images: int, seed: int, size: int = 32
) -> tuple[np.ndarray, np.ndarray]:
    """Balanced class cycle; deterministic in (num_images, seed, size)."""
    images = np.empty((num_images, size, size, 3), dtype=np.float32)
    labels = np.empty(num_images, dtype=np.int64)
    for i in range(num_images):
        cls = i % NUM_CLASSES
        rng = np.random.default_rng([seed, i])
        images[i] = render_image(cls, rng, size)
        labels[i] = cls
    perm = np.random.default_rng([seed, num_images]).permutation(num_images)
    return images[perm], labels[perm]


def save_dataset(out_dir, images: np.ndarray, labels: np.ndarray, meta: dict | None = None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "images.npy", images.astype(np.float32))
    np.save(out_dir / "labels.npy", labels.astype(np.int64))
    info = {"count": int(images.shape[0]), "image_shape": list(images.shape[1:])}
    info.update(meta or {})
    (out_dir / "manifest.json").write_text(json.dumps(info, indent=2))


def load_dataset(data_dir) -> tuple[np.ndarray, np.ndarray]:
    data_dir = Path(data_dir)
    images = np.load(data_dir / "images.npy")
    labels = np.load(data_dir / "labels.npy")
    if images.ndim != 4 or images.shape[0] != labels.shape[0]:
        raise ValueError(f"malformed dataset in {data_dir}")
    return images.astype(np.float32), labels.astype(np.int64)


def to_batch(images: np.ndarray) -> torch.Tensor:
    """[S,H,W,C] float numpy to [S,C,H,W] float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()


def train_source(
    images: np.ndarray,
    labels: np.ndarray,
    seed: int = 0,
    epochs: int = 12,
    batch_size: int = 128,
    lr: float = 1e-3,
    widths: tuple[int, ...] = (32, 64, 128),
    verbose: bool = False,
) -> SplitModel:
    """Train the source classifier on clean data with flip augmentation."""
    torch.manual_seed(seed)
    model = build_model(NUM_CLASSES, in_channels=3, widths=widths, image_size=images.shape[1])
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    x_all = to_batch(images)
    y_all = torch.from_numpy(labels)
    n = x_all.shape[0]
    gen = torch.Generator().manual_seed(seed)
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=gen)
        total, correct = 0.0, 0
        for start in range(0, n, batch_size):
            sel = perm[start : start + batch_size]
            xb, yb = x_all[sel], y_all[sel]
            flip = torch.rand(xb.shape[0], generator=gen) < 0.5
            xb = torch.where(flip[:, None, None, None], xb.flip(-1), xb)
            z = model.encoder(xb)
            logits = model.head(z)
            loss = torch.nn.functional.cross_entropy(logits, yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(sel)
            correct += int((logits.argmax(1) == yb).sum())
        if verbose:
            print(f"epoch {epoch}: loss {total / n:.4f} acc {correct / n:.4f}")
    model.eval()
    return model


def train_and_save(images, labels, ckpt_path, **kwargs) -> SplitModel:
    model = train_source(images, labels, **kwargs)
    save_checkpoint(model, ckpt_path)
    return model
