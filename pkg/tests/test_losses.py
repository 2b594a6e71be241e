"""Objective functions against independent brute-force oracles.

The oracles below recompute every loss with plain python loops in float64;
library outputs must match them to 1e-10 on random simplex inputs, and
fixed spot values are frozen as regression anchors.
"""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_probs
from ttakit.losses import (
    EPS,
    BatchPredictions,
    loss_kd,
    loss_pl,
    loss_tesla,
    mi_identity_residual,
    prediction_entropy,
)

# --- oracles ---------------------------------------------------------------


def _slog(v: float) -> float:
    return math.log(max(v, EPS))


def oracle_pl(f: np.ndarray, y: np.ndarray) -> float:
    b, k = f.shape
    fce = 0.0
    for i in range(b):
        for j in range(k):
            fce -= f[i, j] * _slog(y[i, j])
    fce /= b
    marg = [sum(f[i, j] for i in range(b)) / b for j in range(k)]
    ent = sum(m * _slog(m) for m in marg)
    return fce + ent


def oracle_kd(f: np.ndarray, y: np.ndarray) -> float:
    out = 0.0
    for j in range(len(y)):
        if y[j] > 0:
            out += y[j] * (_slog(y[j]) - _slog(f[j]))
    return out


# --- frozen spot values ----------------------------------------------------


def test_pl_matched_onehot_is_negative_log2():
    f = torch.eye(2, dtype=torch.float64)
    assert float(loss_pl(f, f.clone())) == pytest.approx(-math.log(2.0), abs=1e-12)


def test_pl_uniform_student_onehot_targets_floor_active():
    f = torch.full((2, 2), 0.5)
    y = torch.eye(2)
    # half the student mass falls on zero-probability targets, hitting the
    # 1e-8 log floor: 0.5 * (-log 1e-8) - log 2
    assert float(loss_pl(f, y)) == pytest.approx(8.517193191416238, abs=1e-6)


def test_pl_soft_frozen_value():
    f = torch.tensor([[0.7, 0.2, 0.1], [0.1, 0.6, 0.3]])
    y = torch.tensor([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3]])
    assert float(loss_pl(f, y)) == pytest.approx(-0.1715926941471726, abs=1e-6)


def test_kd_onehot_target_against_uniform_is_log2():
    f = torch.tensor([0.5, 0.5])
    y = torch.tensor([1.0, 0.0])
    assert float(loss_kd(f, y)) == pytest.approx(math.log(2.0), abs=1e-7)


def test_kd_identical_rows_is_zero():
    p = torch.tensor([[0.3, 0.3, 0.4], [0.1, 0.8, 0.1]])
    out = loss_kd(p, p.clone())
    assert out.shape == (2,)
    assert float(out.abs().max()) < 1e-12


def test_kd_soft_frozen_value():
    f = torch.tensor([0.7, 0.2, 0.1])
    y = torch.tensor([0.2, 0.5, 0.3])
    assert float(loss_kd(f, y)) == pytest.approx(0.5371764588384367, abs=1e-6)


def test_tesla_combination_frozen_value():
    f = torch.tensor([[0.7, 0.2, 0.1], [0.1, 0.6, 0.3]])
    y = torch.tensor([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3]])
    batch = BatchPredictions(f, f.flip(0), y)
    assert float(loss_tesla(batch, lambda2=1.0)) == pytest.approx(
        0.47562068452306483, abs=1e-6
    )
    # lambda2 scales only the consistency part
    pl_only = float(loss_pl(f, y))
    assert float(loss_tesla(batch, lambda2=0.0)) == pytest.approx(pl_only, abs=1e-7)


# --- random-input agreement with the oracles -------------------------------


def test_pl_matches_oracle_on_random_inputs(rng):
    for _ in range(100):
        b = int(rng.integers(1, 17))
        k = int(rng.integers(2, 9))
        f = random_probs(rng, b, k)
        y = random_probs(rng, b, k)
        ours = float(loss_pl(torch.from_numpy(f), torch.from_numpy(y)))
        assert ours == pytest.approx(oracle_pl(f, y), abs=1e-10)


def test_kd_matches_oracle_on_random_inputs(rng):
    for _ in range(100):
        k = int(rng.integers(2, 9))
        f = random_probs(rng, 1, k)[0]
        y = random_probs(rng, 1, k)[0]
        ours = float(loss_kd(torch.from_numpy(f), torch.from_numpy(y)))
        assert ours == pytest.approx(oracle_kd(f, y), abs=1e-10)


def test_tesla_matches_oracle_composition(rng):
    for _ in range(50):
        b = int(rng.integers(1, 9))
        k = int(rng.integers(2, 7))
        f = random_probs(rng, b, k)
        fa = random_probs(rng, b, k)
        y = random_probs(rng, b, k)
        lam = float(rng.uniform(0.0, 2.0))
        batch = BatchPredictions(
            torch.from_numpy(f), torch.from_numpy(fa), torch.from_numpy(y)
        )
        expect = oracle_pl(f, y) + lam * np.mean([oracle_kd(fa[i], y[i]) for i in range(b)])
        assert float(loss_tesla(batch, lambda2=lam)) == pytest.approx(expect, abs=1e-10)


# --- structural properties -------------------------------------------------


def test_pseudo_labels_receive_no_gradient():
    f = torch.softmax(torch.randn(4, 5, requires_grad=True), dim=1)
    y = torch.softmax(torch.randn(4, 5), dim=1).requires_grad_(True)
    loss = loss_pl(f, y) + loss_kd(f, y).mean()
    loss.backward()
    assert y.grad is None or float(y.grad.abs().max()) == 0.0


def test_pl_rejects_bad_inputs():
    good = torch.full((2, 3), 1.0 / 3)
    with pytest.raises(ValueError):
        loss_pl(torch.zeros(0, 3), torch.zeros(0, 3))
    with pytest.raises(ValueError):
        loss_pl(good, torch.tensor([[0.9, 0.9, 0.9], [0.1, 0.1, 0.1]]))
    with pytest.raises(ValueError):
        loss_pl(good, torch.full((2, 4), 0.25))


def test_kd_nonnegative_random(rng):
    for _ in range(50):
        k = int(rng.integers(2, 9))
        f = random_probs(rng, 3, k)
        y = random_probs(rng, 3, k)
        assert float(loss_kd(torch.from_numpy(f), torch.from_numpy(y)).min()) >= -1e-12


@given(st.integers(2, 8), st.integers(1, 12), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_pl_lower_bound_when_fce_vanishes(k, b, seed):
    # student one-hot and pseudo-labels matching: the flipped CE term is 0
    # and loss_pl reduces to minus the marginal entropy, bounded by -log K
    r = np.random.default_rng(seed)
    classes = r.integers(0, k, size=b)
    f = np.zeros((b, k))
    f[np.arange(b), classes] = 1.0
    t = torch.from_numpy(f)
    out = float(loss_pl(t, t.clone()))
    assert out >= -math.log(k) - 1e-9
    assert out <= 1e-9


def test_entropy_uniform_is_log_k():
    p = torch.full((3, 8), 1.0 / 8)
    assert torch.allclose(prediction_entropy(p), torch.full((3,), math.log(8.0)), atol=1e-6)


# --- mutual information identity ------------------------------------------


def oracle_mi_residual(p_y: np.ndarray, p_yhat: np.ndarray) -> float:
    b, k = p_y.shape

    def xlogy(a, v):
        return a * math.log(v) if a > 0 else 0.0

    fce = -sum(xlogy(p_y[i, j], p_yhat[i, j]) for i in range(b) for j in range(k)) / b
    h_cond = -sum(xlogy(p_y[i, j], p_y[i, j]) for i in range(b) for j in range(k)) / b
    marg = [sum(p_y[i, j] for i in range(b)) / b for j in range(k)]
    h_marg = -sum(xlogy(m, m) for m in marg)
    mi = h_marg - h_cond
    kl = (
        sum(
            xlogy(p_y[i, j], p_y[i, j]) - xlogy(p_y[i, j], p_yhat[i, j])
            for i in range(b)
            for j in range(k)
        )
        / b
    )
    return abs((fce - h_marg) - (-mi + kl))


def test_mi_identity_on_random_instances(rng):
    worst = 0.0
    for _ in range(100):
        b = int(rng.integers(1, 17))
        k = int(rng.integers(2, 9))
        p_y = random_probs(rng, b, k)
        p_yhat = random_probs(rng, b, k)
        res = mi_identity_residual(p_y, p_yhat)
        assert res == pytest.approx(oracle_mi_residual(p_y, p_yhat), abs=1e-12)
        worst = max(worst, res)
    assert worst < 1e-9


def test_mi_identity_handles_hard_zero_targets():
    p_y = np.array([[1.0, 0.0], [0.0, 1.0]])
    p_yhat = np.array([[0.9, 0.1], [0.2, 0.8]])
    assert mi_identity_residual(p_y, p_yhat) < 1e-12
