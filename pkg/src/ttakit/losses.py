"""Adaptation objectives on probability vectors.

All losses take softmax outputs, not logits.  Logs are floored at EPS by
clamping, so probabilities >= EPS are left untouched and zero entries in a
target distribution contribute exactly zero via the 0*log(0)=0 convention.
Soft pseudo-labels are always detached before entering a loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

EPS = 1e-8
SIMPLEX_TOL = 1e-5


def _check_probs(p: torch.Tensor, name: str) -> None:
    if p.dim() != 2 or p.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty [B,K] tensor, got {tuple(p.shape)}")
    if (p < -SIMPLEX_TOL).any():
        raise ValueError(f"{name} has negative entries")
    rows = p.sum(dim=1)
    if (rows - 1.0).abs().max() > SIMPLEX_TOL:
        raise ValueError(f"{name} rows do not sum to 1 (max dev {float((rows - 1).abs().max()):.2e})")


def _safe_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(min=EPS))


def prediction_entropy(probs: torch.Tensor) -> torch.Tensor:
    """Shannon entropy per row, in nats."""
    return -(probs * _safe_log(probs)).sum(dim=-1)


def loss_pl(student_probs: torch.Tensor, pseudo_labels: torch.Tensor) -> torch.Tensor:
    """Flipped cross-entropy to soft pseudo-labels plus marginal entropy.

    -(1/B) sum_i sum_k f(x_i)_k log(yhat_i)_k  +  sum_k fbar_k log fbar_k
    where fbar is the batch-mean prediction.  Pseudo-labels are detached.
    """
    _check_probs(student_probs, "student_probs")
    _check_probs(pseudo_labels, "pseudo_labels")
    if student_probs.shape != pseudo_labels.shape:
        raise ValueError("student_probs and pseudo_labels must have matching shapes")
    yhat = pseudo_labels.detach()
    fce = -(student_probs * _safe_log(yhat)).sum(dim=1).mean()
    marginal = student_probs.mean(dim=0)
    neg_marg_entropy = (marginal * _safe_log(marginal)).sum()
    return fce + neg_marg_entropy


def loss_kd(student_probs_aug: torch.Tensor, pseudo_labels: torch.Tensor) -> torch.Tensor:
    """KL(yhat || f(x_aug)) per row; scalar for 1-D inputs, vector for 2-D.

    Computed as sum_k yhat_k (log yhat_k - log f_k): rows of yhat with zero
    mass contribute nothing, and the student term is log-floored.
    """
    single = student_probs_aug.dim() == 1
    f = student_probs_aug.unsqueeze(0) if single else student_probs_aug
    y = pseudo_labels.unsqueeze(0) if single else pseudo_labels
    _check_probs(f, "student_probs_aug")
    _check_probs(y, "pseudo_labels")
    if f.shape != y.shape:
        raise ValueError("student_probs_aug and pseudo_labels must have matching shapes")
    y = y.detach()
    zero = torch.zeros((), dtype=f.dtype, device=f.device)
    terms = torch.where(y > 0, y * (_safe_log(y) - _safe_log(f)), zero)
    kl = terms.sum(dim=1)
    return kl[0] if single else kl


@dataclass
class BatchPredictions:
    """Student outputs on a clean and an augmented view plus pseudo-labels."""

    student_probs: torch.Tensor
    student_probs_aug: torch.Tensor
    pseudo_labels: torch.Tensor

    def __post_init__(self):
        _check_probs(self.student_probs, "student_probs")
        _check_probs(self.student_probs_aug, "student_probs_aug")
        _check_probs(self.pseudo_labels, "pseudo_labels")
        if not (
            self.student_probs.shape
            == self.student_probs_aug.shape
            == self.pseudo_labels.shape
        ):
            raise ValueError("all three prediction blocks must share one [B,K] shape")


def loss_tesla(batch: BatchPredictions, lambda2: float = 1.0) -> torch.Tensor:
    """Full self-learning objective: loss_pl + (lambda2/B) sum_i loss_kd_i."""
    pl = loss_pl(batch.student_probs, batch.pseudo_labels)
    kd = loss_kd(batch.student_probs_aug, batch.pseudo_labels).mean()
    return pl + lambda2 * kd


def mi_identity_residual(p_y: np.ndarray, p_yhat: np.ndarray) -> float:
    """Residual of the information decomposition of flipped cross-entropy.

    With X uniform over the batch rows, p_y the prediction distribution and
    p_yhat the pseudo-label distribution, the identity

        fce - H(Y) == -I(X;Y) + E_x[ KL(p_y(.|x) || p_yhat(.|x)) ]

    holds, where fce = E_x[-sum_k p_y(k|x) log p_yhat(k|x)], H(Y) is the
    entropy of the batch-marginal of p_y and I(X;Y) = H(Y) - E_x H(Y|x).
    Every term is computed from its definition in float64; the return value
    is |lhs - rhs|.
    """
    p_y = np.asarray(p_y, dtype=np.float64)
    p_yhat = np.asarray(p_yhat, dtype=np.float64)
    if p_y.shape != p_yhat.shape or p_y.ndim != 2:
        raise ValueError("expected two [B,K] arrays of matching shape")

    def xlogy(x, y):
        out = np.zeros_like(x)
        mask = x > 0
        out[mask] = x[mask] * np.log(y[mask])
        return out

    fce = -xlogy(p_y, p_yhat).sum(axis=1).mean()
    h_cond = -xlogy(p_y, p_y).sum(axis=1).mean()
    marginal = p_y.mean(axis=0)
    h_marg = -xlogy(marginal, marginal).sum()
    mutual_info = h_marg - h_cond
    kl = (xlogy(p_y, p_y) - xlogy(p_y, p_yhat)).sum(axis=1).mean()
    lhs = fce - h_marg
    rhs = -mutual_info + kl
    return float(abs(lhs - rhs))
