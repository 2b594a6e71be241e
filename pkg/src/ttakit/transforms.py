"""Image operation registry for the learned augmentation policy.

Every op maps a batch x in [0,1]^{B,C,H,W} and a per-sample magnitude
m in [0,1]^B to an augmented batch of the same shape.  Geometric and
photometric ops are differentiable in both x and m.  The four inherently
discrete ops (AutoContrast, Equalize, Invert, Posterize) use a
straight-through estimator: forward returns the hard result, backward
treats the op as identity in x and assigns a unit per-pixel gradient to m.

Magnitude conventions (identity magnitude in brackets, None if the op has
no identity point):
  ShearX/ShearY      shear factor (2m-1)*0.3          [0.5]
  TranslateX/Y       shift fraction (2m-1)*0.3        [0.5]
  Rotate             angle (2m-1)*30 degrees          [0.5]
  Brightness/Contrast/Color/Sharpness
                     blend factor 0.1 + 1.8m          [0.5]
  Solarize           threshold 1-m, soft gate         [None]
  Posterize          bits 8 - round(4m)               [None]
  AutoContrast/Equalize/Invert
                     magnitude ignored                [None]
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

MAX_SHEAR = 0.3
MAX_TRANSLATE = 0.3
MAX_ROTATE_DEG = 30.0
SOLARIZE_TAU = 0.02

_LUMA = (0.299, 0.587, 0.114)


def _as_batch_mag(x: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    m = torch.as_tensor(m, dtype=x.dtype, device=x.device)
    if m.dim() == 0:
        m = m.expand(x.shape[0])
    if m.shape != (x.shape[0],):
        raise ValueError(f"magnitude must be scalar or [B], got {tuple(m.shape)}")
    return m


def _straight_through(x: torch.Tensor, hard: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    # value: hard(x); gradient: identity wrt x, unit per pixel wrt m
    m_px = m.view(-1, 1, 1, 1).expand_as(x)
    return x + (hard - x).detach() + (m_px - m_px.detach())


def _affine(x: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def _blend(x: torch.Tensor, base: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    factor = (0.1 + 1.8 * m).view(-1, 1, 1, 1)
    return (base + factor * (x - base)).clamp(0.0, 1.0)


def _grayscale(x: torch.Tensor) -> torch.Tensor:
    if x.shape[1] != 3:
        return x.mean(dim=1, keepdim=True).expand_as(x)
    r, g, b = x[:, 0:1], x[:, 1:2], x[:, 2:3]
    return (_LUMA[0] * r + _LUMA[1] * g + _LUMA[2] * b).expand_as(x)


# --- differentiable ops ----------------------------------------------------


def _shear_x(x, m):
    m = _as_batch_mag(x, m)
    s = (2.0 * m - 1.0) * MAX_SHEAR
    zero = torch.zeros_like(s)
    one = torch.ones_like(s)
    theta = torch.stack(
        [torch.stack([one, s, zero], dim=1), torch.stack([zero, one, zero], dim=1)], dim=1
    )
    return _affine(x, theta)


def _shear_y(x, m):
    m = _as_batch_mag(x, m)
    s = (2.0 * m - 1.0) * MAX_SHEAR
    zero = torch.zeros_like(s)
    one = torch.ones_like(s)
    theta = torch.stack(
        [torch.stack([one, zero, zero], dim=1), torch.stack([s, one, zero], dim=1)], dim=1
    )
    return _affine(x, theta)


def _translate_x(x, m):
    m = _as_batch_mag(x, m)
    t = (2.0 * m - 1.0) * MAX_TRANSLATE * 2.0  # grid coords span [-1, 1]
    zero = torch.zeros_like(t)
    one = torch.ones_like(t)
    theta = torch.stack(
        [torch.stack([one, zero, t], dim=1), torch.stack([zero, one, zero], dim=1)], dim=1
    )
    return _affine(x, theta)


def _translate_y(x, m):
    m = _as_batch_mag(x, m)
    t = (2.0 * m - 1.0) * MAX_TRANSLATE * 2.0
    zero = torch.zeros_like(t)
    one = torch.ones_like(t)
    theta = torch.stack(
        [torch.stack([one, zero, zero], dim=1), torch.stack([zero, one, t], dim=1)], dim=1
    )
    return _affine(x, theta)


def _rotate(x, m):
    m = _as_batch_mag(x, m)
    angle = (2.0 * m - 1.0) * (MAX_ROTATE_DEG * torch.pi / 180.0)
    cos, sin = torch.cos(angle), torch.sin(angle)
    zero = torch.zeros_like(angle)
    theta = torch.stack(
        [torch.stack([cos, -sin, zero], dim=1), torch.stack([sin, cos, zero], dim=1)], dim=1
    )
    return _affine(x, theta)


def _brightness(x, m):
    m = _as_batch_mag(x, m)
    return _blend(x, torch.zeros_like(x), m)


def _contrast(x, m):
    m = _as_batch_mag(x, m)
    mean = _grayscale(x).mean(dim=(1, 2, 3), keepdim=True).expand_as(x)
    return _blend(x, mean, m)


def _color(x, m):
    m = _as_batch_mag(x, m)
    return _blend(x, _grayscale(x), m)


_SMOOTH_KERNEL = torch.tensor(
    [[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]]
) / 13.0


def _sharpness(x, m):
    m = _as_batch_mag(x, m)
    c = x.shape[1]
    kernel = _SMOOTH_KERNEL.to(dtype=x.dtype, device=x.device).expand(c, 1, 3, 3)
    padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
    smooth = F.conv2d(padded, kernel, groups=c)
    return _blend(x, smooth, m)


def _solarize(x, m):
    # soft threshold: pixels above 1-m are pulled toward their inverse
    m = _as_batch_mag(x, m)
    thr = (1.0 - m).view(-1, 1, 1, 1)
    gate = torch.sigmoid((x - thr) / SOLARIZE_TAU)
    return (x + gate * (1.0 - 2.0 * x)).clamp(0.0, 1.0)


# --- straight-through ops --------------------------------------------------


def _posterize(x, m):
    m = _as_batch_mag(x, m)
    bits = 8 - torch.round(4.0 * m.detach())
    levels = (2.0**bits - 1.0).view(-1, 1, 1, 1)
    hard = torch.round(x.detach() * levels) / levels
    return _straight_through(x, hard, m)


def _invert(x, m):
    m = _as_batch_mag(x, m)
    return _straight_through(x, 1.0 - x.detach(), m)


def _autocontrast(x, m):
    m = _as_batch_mag(x, m)
    xd = x.detach()
    lo = xd.amin(dim=(2, 3), keepdim=True)
    hi = xd.amax(dim=(2, 3), keepdim=True)
    span = hi - lo
    flat = span < 1e-6
    scale = torch.where(flat, torch.ones_like(span), 1.0 / span.clamp(min=1e-6))
    hard = torch.where(flat, xd, ((xd - lo) * scale).clamp(0.0, 1.0))
    return _straight_through(x, hard, m)


def _equalize_channel(ch: torch.Tensor) -> torch.Tensor:
    # ch: [H, W] in [0,1]; classic 256-bin histogram equalization
    idx = (ch * 255.0).round().clamp(0, 255).to(torch.int64)
    hist = torch.bincount(idx.reshape(-1), minlength=256).to(torch.float64)
    cdf = hist.cumsum(0)
    nonzero = hist > 0
    if not nonzero.any():
        return ch
    cdf_min = cdf[nonzero][0]
    total = cdf[-1]
    if total <= cdf_min:
        return ch
    lut = ((cdf - cdf_min) / (total - cdf_min) * 255.0).round().clamp(0, 255)
    return (lut[idx] / 255.0).to(ch.dtype)


def _equalize(x, m):
    m = _as_batch_mag(x, m)
    xd = x.detach()
    hard = torch.stack(
        [torch.stack([_equalize_channel(img[c]) for c in range(img.shape[0])]) for img in xd]
    )
    return _straight_through(x, hard, m)


@dataclass(frozen=True)
class TransformOp:
    name: str
    apply: Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
    differentiable: bool
    identity_magnitude: float | None


OPS: tuple[TransformOp, ...] = (
    TransformOp("AutoContrast", _autocontrast, False, None),
    TransformOp("Equalize", _equalize, False, None),
    TransformOp("Invert", _invert, False, None),
    TransformOp("Solarize", _solarize, True, None),
    TransformOp("Posterize", _posterize, False, None),
    TransformOp("Contrast", _contrast, True, 0.5),
    TransformOp("Brightness", _brightness, True, 0.5),
    TransformOp("Color", _color, True, 0.5),
    TransformOp("ShearX", _shear_x, True, 0.5),
    TransformOp("ShearY", _shear_y, True, 0.5),
    TransformOp("TranslateX", _translate_x, True, 0.5),
    TransformOp("TranslateY", _translate_y, True, 0.5),
    TransformOp("Rotate", _rotate, True, 0.5),
    TransformOp("Sharpness", _sharpness, True, 0.5),
)

OP_NAMES: tuple[str, ...] = tuple(op.name for op in OPS)
OP_INDEX: dict[str, int] = {op.name: i for i, op in enumerate(OPS)}


def get_op(name: str) -> TransformOp:
    try:
        return OPS[OP_INDEX[name]]
    except KeyError:
        raise KeyError(f"unknown transform op {name!r}; known: {', '.join(OP_NAMES)}") from None
