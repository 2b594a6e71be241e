"""Synthetic test-set corruptions at five severities.

Images are float32 [S,H,W,C] arrays in [0,1].  Each family exposes a
monotone severity schedule sized for small (32x32) images.  Generation is
deterministic in (name, severity, seed) and independent of image order:
sample i draws from a fresh rng seeded with (seed, i).
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

SEVERITIES = (1, 2, 3, 4, 5)

SCHEDULES: dict[str, list] = {
    "gaussian_noise": [0.06, 0.09, 0.13, 0.18, 0.26],  # additive sigma
    "shot_noise": [60.0, 25.0, 12.0, 5.0, 3.0],  # photons per unit intensity
    "impulse_noise": [0.03, 0.06, 0.09, 0.17, 0.27],  # salt/pepper fraction
    "defocus_blur": [1.0, 1.5, 2.0, 2.5, 3.0],  # disk radius px
    "motion_blur": [3, 5, 7, 9, 11],  # kernel length px
    "snow_like": [(0.03, 0.08), (0.05, 0.12), (0.07, 0.18), (0.10, 0.25), (0.14, 0.32)],
    "contrast": [0.4, 0.3, 0.2, 0.1, 0.05],  # contrast factor
    "brightness": [0.1, 0.2, 0.3, 0.4, 0.5],  # additive offset
    "pixelate": [0.6, 0.5, 0.4, 0.3, 0.25],  # downscale side fraction
    "jpeg_like": [25, 18, 15, 10, 7],  # encoder quality
}


def _level(name: str, severity: int):
    if severity not in SEVERITIES:
        raise ValueError(f"severity must be 1..5, got {severity}")
    return SCHEDULES[name][severity - 1]


def _gaussian_noise(img, severity, rng):
    sigma = _level("gaussian_noise", severity)
    return img + rng.normal(0.0, sigma, size=img.shape)


def _shot_noise(img, severity, rng):
    scale = _level("shot_noise", severity)
    return rng.poisson(np.clip(img, 0, 1) * scale) / scale


def _impulse_noise(img, severity, rng):
    amount = _level("impulse_noise", severity)
    out = img.copy()
    mask = rng.random(img.shape[:2])
    salt = mask < amount / 2
    pepper = (mask >= amount / 2) & (mask < amount)
    out[salt] = 1.0
    out[pepper] = 0.0
    return out


def _disk_kernel(radius: float) -> np.ndarray:
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    k = ((xx**2 + yy**2) <= radius**2).astype(np.float64)
    return k / k.sum()


def _convolve_channels(img, kernel):
    out = np.empty_like(img, dtype=np.float64)
    for c in range(img.shape[2]):
        out[:, :, c] = ndimage.convolve(img[:, :, c].astype(np.float64), kernel, mode="reflect")
    return out


def _defocus_blur(img, severity, rng):
    return _convolve_channels(img, _disk_kernel(_level("defocus_blur", severity)))


def _motion_blur(img, severity, rng):
    length = _level("motion_blur", severity)
    angle = rng.uniform(0, np.pi)
    k = np.zeros((length, length))
    c = (length - 1) / 2
    for t in np.linspace(-c, c, 4 * length):
        y = int(round(c + t * np.sin(angle)))
        x = int(round(c + t * np.cos(angle)))
        k[y, x] = 1.0
    return _convolve_channels(img, k / k.sum())


def _snow_like(img, severity, rng):
    density, haze = _level("snow_like", severity)
    h, w = img.shape[:2]
    flakes = (rng.random((h, w)) < density).astype(np.float64)
    flakes = ndimage.gaussian_filter(flakes, sigma=0.7)
    flakes = np.clip(flakes / max(flakes.max(), 1e-6), 0, 1)[..., None]
    out = img * (1 - haze) + haze  # flat white haze
    return out * (1 - flakes) + flakes  # bright flakes on top


def _contrast(img, severity, rng):
    c = _level("contrast", severity)
    mean = img.mean()
    return (img - mean) * c + mean


def _brightness(img, severity, rng):
    return img + _level("brightness", severity)


def _pixelate(img, severity, rng):
    frac = _level("pixelate", severity)
    h, w = img.shape[:2]
    small = (max(1, int(round(h * frac))), max(1, int(round(w * frac))))
    pil = Image.fromarray((np.clip(img, 0, 1) * 255).round().astype(np.uint8))
    pil = pil.resize(small[::-1], Image.NEAREST).resize((w, h), Image.NEAREST)
    return np.asarray(pil, dtype=np.float64) / 255.0


def _jpeg_like(img, severity, rng):
    quality = _level("jpeg_like", severity)
    pil = Image.fromarray((np.clip(img, 0, 1) * 255).round().astype(np.uint8))
    buf = io.BytesIO()
    pil.save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    return np.asarray(Image.open(buf), dtype=np.float64) / 255.0


CORRUPTIONS = {
    "gaussian_noise": _gaussian_noise,
    "shot_noise": _shot_noise,
    "impulse_noise": _impulse_noise,
    "defocus_blur": _defocus_blur,
    "motion_blur": _motion_blur,
    "snow_like": _snow_like,
    "contrast": _contrast,
    "brightness": _brightness,
    "pixelate": _pixelate,
    "jpeg_like": _jpeg_like,
}


def normalize_name(name: str) -> str:
    key = name.strip().lower().replace("-", "_")
    if key in ("snow", "snowlike"):
        key = "snow_like"
    if key in ("jpeg", "jpeglike", "jpeg_compression"):
        key = "jpeg_like"
    if key not in CORRUPTIONS:
        raise KeyError(f"unknown corruption {name!r}; known: {', '.join(sorted(CORRUPTIONS))}")
    return key


@dataclass(frozen=True)
class CorruptionSpec:
    name: str
    severity: int
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "name", normalize_name(self.name))
        if self.severity not in SEVERITIES:
            raise ValueError(f"severity must be 1..5, got {self.severity}")


def corrupt_image(img: np.ndarray, spec: CorruptionSpec, index: int) -> np.ndarray:
    """Corrupt one image; deterministic in (spec, index) only."""
    rng = np.random.default_rng([spec.seed, index])
    fn = CORRUPTIONS[spec.name]
    out = fn(img.astype(np.float64), spec.severity, rng)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def corrupt_images(images: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    if images.ndim != 4:
        raise ValueError(f"expected [S,H,W,C] images, got shape {images.shape}")
    return np.stack([corrupt_image(images[i], spec, i) for i in range(images.shape[0])])


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def build_corrupted_set(clean_dir, spec: CorruptionSpec, out_dir) -> dict:
    """Corrupt a saved dataset directory and write images, labels, manifest."""
    clean_dir, out_dir = Path(clean_dir), Path(out_dir)
    images = np.load(clean_dir / "images.npy")
    labels = np.load(clean_dir / "labels.npy")
    corrupted = corrupt_images(images, spec)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "images.npy", corrupted)
    np.save(out_dir / "labels.npy", labels)
    manifest = {
        "corruption": spec.name,
        "severity": spec.severity,
        "seed": spec.seed,
        "count": int(images.shape[0]),
        "image_shape": list(images.shape[1:]),
        "clean_sha256": _digest(images),
        "images_sha256": _digest(corrupted),
        "labels_sha256": _digest(labels),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
