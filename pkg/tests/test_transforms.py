"""Augmentation ops: ranges, identities, gradients.

Finite-difference magnitude checks run on smooth float64 images and
compare against a scalar projection of the output; geometric ops are
piecewise-bilinear in m, so probes stay small and images low-frequency.
"""

import numpy as np
import pytest
import torch

from ttakit.transforms import OP_INDEX, OP_NAMES, OPS, get_op

ST_OPS = ("AutoContrast", "Equalize", "Invert", "Posterize")


def smooth_batch(b=2, size=16, dtype=torch.float64, seed=0):
    """Low-frequency images in (0,1), differentiable-friendly."""
    gen = np.random.default_rng(seed)
    lin = np.linspace(0, 2 * np.pi, size)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    imgs = []
    for _ in range(b * 3):
        a, bb, c = gen.uniform(0.5, 1.5, 3)
        phase = gen.uniform(0, 2 * np.pi, 2)
        img = 0.5 + 0.22 * np.sin(a * xx + phase[0]) * np.cos(bb * yy + phase[1]) + 0.08 * np.sin(c * (xx + yy))
        imgs.append(np.clip(img, 0.05, 0.95))
    arr = np.stack(imgs).reshape(b, 3, size, size)
    return torch.tensor(arr, dtype=dtype)


def test_registry_size_and_names():
    assert len(OPS) == 14
    assert OP_NAMES == (
        "AutoContrast", "Equalize", "Invert", "Solarize", "Posterize",
        "Contrast", "Brightness", "Color", "ShearX", "ShearY",
        "TranslateX", "TranslateY", "Rotate", "Sharpness",
    )
    assert get_op("Rotate").differentiable
    with pytest.raises(KeyError):
        get_op("Blur")


@pytest.mark.parametrize("name", OP_NAMES)
def test_output_shape_and_range(name):
    x = torch.rand(3, 3, 16, 16)
    m = torch.tensor([0.0, 0.5, 1.0])
    out = get_op(name).apply(x, m)
    assert out.shape == x.shape
    assert float(out.min()) >= -1e-6 and float(out.max()) <= 1 + 1e-6


@pytest.mark.parametrize(
    "name", [op.name for op in OPS if op.identity_magnitude is not None]
)
def test_identity_magnitude(name):
    op = get_op(name)
    x = smooth_batch(2, dtype=torch.float32)
    m = torch.full((2,), op.identity_magnitude)
    out = op.apply(x, m)
    assert float((out - x).abs().max()) < 1e-6


def test_brightness_scales_pixels():
    x = torch.full((1, 3, 4, 4), 0.4)
    out = get_op("Brightness").apply(x, torch.tensor([0.7777777778]))  # factor 1.5
    assert torch.allclose(out, torch.full_like(x, 0.6), atol=1e-6)


def test_invert_values():
    x = torch.rand(2, 3, 8, 8)
    out = get_op("Invert").apply(x, torch.tensor([0.3, 0.9]))
    assert torch.allclose(out, 1.0 - x, atol=1e-7)


def test_posterize_severity_grows_with_magnitude():
    x = smooth_batch(1, dtype=torch.float32)
    lo = get_op("Posterize").apply(x, torch.tensor([0.0]))
    hi = get_op("Posterize").apply(x, torch.tensor([1.0]))
    assert len(hi.unique()) < len(lo.unique())
    assert len(hi.unique()) <= 2**4 * 3  # at most 16 levels per channel


def test_solarize_flips_bright_pixels_only():
    x = torch.tensor([0.1, 0.45, 0.9]).repeat(3, 1)[None, :, :, None].permute(0, 1, 3, 2)
    out = get_op("Solarize").apply(x, torch.tensor([0.5]))  # threshold 0.5
    flat_in = x.reshape(-1)
    flat_out = out.reshape(-1)
    for v_in, v_out in zip(flat_in, flat_out):
        if v_in < 0.4:
            assert abs(v_out - v_in) < 1e-3  # below threshold: untouched
        if v_in > 0.6:
            assert abs(v_out - (1 - v_in)) < 1e-3  # above: inverted


def test_autocontrast_stretches_to_full_range():
    x = torch.rand(2, 3, 16, 16) * 0.4 + 0.3
    out = get_op("AutoContrast").apply(x, torch.tensor([0.5, 0.5]))
    for b in range(2):
        for c in range(3):
            assert float(out[b, c].min()) == pytest.approx(0.0, abs=1e-6)
            assert float(out[b, c].max()) == pytest.approx(1.0, abs=1e-6)


def test_equalize_flattens_histogram():
    gen = torch.Generator().manual_seed(5)
    x = (torch.rand(1, 3, 16, 16, generator=gen) * 0.3).clamp(0, 1)  # squeezed values
    out = get_op("Equalize").apply(x, torch.tensor([0.5]))
    assert float(out.max()) > 0.9  # spread over the full range


@pytest.mark.parametrize("name", ST_OPS)
def test_straight_through_gradients(name):
    op = get_op(name)
    x = smooth_batch(2, size=8)
    x.requires_grad_(True)
    m = torch.tensor([0.3, 0.8], dtype=torch.float64, requires_grad=True)
    out = op.apply(x, m)
    out.sum().backward()
    # identity jacobian wrt the input image
    assert torch.allclose(x.grad, torch.ones_like(x))
    # unit per-pixel gradient wrt the magnitude
    per_image = x.shape[1] * x.shape[2] * x.shape[3]
    assert torch.allclose(m.grad, torch.full_like(m, float(per_image)))


def fd_magnitude_check(name, seed=0, h=1e-6, rtol=1e-3):
    """Central finite differences on a scalar projection of the op output."""
    op = get_op(name)
    x = smooth_batch(1, seed=seed)
    gen = torch.Generator().manual_seed(seed + 100)
    w = torch.rand(x.shape, generator=gen, dtype=torch.float64)
    m0 = {"Solarize": 0.45, "Posterize": 0.3}.get(name, 0.37)

    m = torch.tensor([m0], dtype=torch.float64, requires_grad=True)
    s = (op.apply(x, m) * w).sum()
    (grad,) = torch.autograd.grad(s, m)

    def val(mm):
        with torch.no_grad():
            return float((op.apply(x, torch.tensor([mm], dtype=torch.float64)) * w).sum())

    fd = (val(m0 + h) - val(m0 - h)) / (2 * h)
    denom = max(abs(fd), abs(float(grad)), 1e-6)
    return abs(float(grad) - fd) / denom


@pytest.mark.parametrize("name", [op.name for op in OPS if op.differentiable])
def test_magnitude_gradients_match_finite_differences(name):
    assert fd_magnitude_check(name) < 1e-3


@pytest.mark.parametrize("name", ["Rotate", "Brightness", "Color"])
def test_input_gradients_flow(name):
    op = get_op(name)
    x = smooth_batch(1, size=8)
    x.requires_grad_(True)
    out = op.apply(x, torch.tensor([0.4], dtype=torch.float64))
    out.sum().backward()
    assert x.grad is not None and float(x.grad.abs().sum()) > 0


def test_per_sample_magnitudes_are_independent():
    x = smooth_batch(3, dtype=torch.float32)
    m = torch.tensor([0.2, 0.5, 0.8])
    out = get_op("Rotate").apply(x, m)
    single = get_op("Rotate").apply(x[1:2], m[1:2])
    assert torch.allclose(out[1], single[0], atol=1e-6)


def test_magnitude_shape_validation():
    x = torch.rand(4, 3, 8, 8)
    with pytest.raises(ValueError):
        get_op("Rotate").apply(x, torch.tensor([0.5, 0.5]))
