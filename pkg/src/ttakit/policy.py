"""Online adversarial augmentation policy learned against the teacher.

The search space is every unordered combination of N distinct ops from the
registry, enumerated in registry order.  The policy keeps a sampling
distribution P over sub-policies (probability simplex with a small floor)
and per-op magnitudes M in [0,1].  Each update samples one sub-policy per
image, evaluates

    loss_aug = sum_k f_t(x_aug)_k log f_t(x_aug)_k
               + lambda1 * (1/L) sum_l ||mu_l(x_aug) - mu_l(x)||^2

(negative teacher entropy plus a feature-shift penalty on per-block channel
means), and descends the score-function gradient estimate

    delta_hat = grad_[P,M] loss_aug + loss_aug * grad_P log p_i .

Descending the negative entropy concentrates P on sub-policies that keep
teacher predictions uncertain, which is the adversarial pressure the
student is then trained to resist.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import torch

from .models import SplitModel, batch_stats_mode
from .transforms import OPS, OP_NAMES, TransformOp

PROB_FLOOR = 1e-4


@dataclass(frozen=True)
class SubPolicy:
    """Ordered application of registry ops identified by index."""

    op_indices: tuple[int, ...]

    @property
    def name(self) -> str:
        return "+".join(OP_NAMES[i] for i in self.op_indices)

    def ops(self) -> tuple[TransformOp, ...]:
        return tuple(OPS[i] for i in self.op_indices)


def enumerate_subpolicies(num_ops: int = 2) -> list[SubPolicy]:
    """All C(|ops|, N) unordered combinations, in registry order."""
    if not 1 <= num_ops <= len(OPS):
        raise ValueError(f"sub-policy size must be in [1, {len(OPS)}], got {num_ops}")
    return [SubPolicy(c) for c in combinations(range(len(OPS)), num_ops)]


def apply_subpolicy(
    x: torch.Tensor, subpolicy: SubPolicy, magnitudes: torch.Tensor
) -> torch.Tensor:
    """Apply the ops of one sub-policy in sequence.

    magnitudes: [N] shared across the batch or [B, N] per sample.
    """
    mags = magnitudes if magnitudes.dim() == 2 else magnitudes.unsqueeze(0).expand(x.shape[0], -1)
    if mags.shape != (x.shape[0], len(subpolicy.op_indices)):
        raise ValueError(
            f"magnitudes shape {tuple(magnitudes.shape)} does not match "
            f"batch {x.shape[0]} and sub-policy size {len(subpolicy.op_indices)}"
        )
    out = x
    for j, op in enumerate(subpolicy.ops()):
        out = op.apply(out, mags[:, j])
    return out


def project_to_floored_simplex(v: torch.Tensor, floor: float = PROB_FLOOR) -> torch.Tensor:
    """Euclidean projection onto {p : sum p = 1, p >= floor}."""
    n = v.numel()
    if n * floor > 1.0:
        raise ValueError(f"floor {floor} infeasible for {n} entries")
    # shift by the floor, project onto the simplex of the remaining mass
    mass = 1.0 - n * floor
    u = (v - floor).to(torch.float64)
    if mass <= 0:
        return torch.full_like(v, floor)
    s, _ = torch.sort(u, descending=True)
    css = torch.cumsum(s, dim=0)
    ks = torch.arange(1, n + 1, dtype=torch.float64, device=v.device)
    cond = s - (css - mass) / ks > 0
    rho = int(torch.nonzero(cond, as_tuple=False).max()) + 1
    tau = (css[rho - 1] - mass) / rho
    return ((u - tau).clamp(min=0.0) + floor).to(v.dtype)


class PolicyState:
    """Sampling distribution and magnitudes over the sub-policy space."""

    def __init__(
        self,
        num_ops: int = 2,
        gamma: float = 0.1,
        prob_floor: float = PROB_FLOOR,
        dtype: torch.dtype = torch.float32,
    ):
        self.subpolicies = enumerate_subpolicies(num_ops)
        self.num_ops = num_ops
        self.gamma = float(gamma)
        self.prob_floor = float(prob_floor)
        n = len(self.subpolicies)
        self.probs = torch.full((n,), 1.0 / n, dtype=dtype)
        self.mags = torch.full((n, num_ops), 0.5, dtype=dtype)
        self.sample_counts = torch.zeros(n, dtype=torch.int64)
        self.updates = 0

    @property
    def size(self) -> int:
        return len(self.subpolicies)

    def check_valid(self, tol: float = 1e-6) -> None:
        if abs(float(self.probs.sum()) - 1.0) > tol:
            raise ValueError(f"policy probabilities sum to {float(self.probs.sum())}")
        if float(self.probs.min()) < self.prob_floor - tol:
            raise ValueError(f"policy probability below floor: {float(self.probs.min())}")
        if float(self.mags.min()) < -tol or float(self.mags.max()) > 1.0 + tol:
            raise ValueError("policy magnitudes left [0,1]")

    def sample_indices(self, count: int, generator: torch.Generator) -> torch.Tensor:
        return torch.multinomial(
            self.probs.to(torch.float64), count, replacement=True, generator=generator
        )

    def state_dict(self) -> dict:
        return {
            "num_ops": self.num_ops,
            "gamma": self.gamma,
            "prob_floor": self.prob_floor,
            "probs": self.probs.clone(),
            "mags": self.mags.clone(),
            "sample_counts": self.sample_counts.clone(),
            "updates": self.updates,
        }

    def load_state_dict(self, state: dict) -> None:
        if state["num_ops"] != self.num_ops:
            raise ValueError("sub-policy size mismatch in policy state")
        self.gamma = state["gamma"]
        self.prob_floor = state["prob_floor"]
        self.probs = state["probs"].clone()
        self.mags = state["mags"].clone()
        self.sample_counts = state["sample_counts"].clone()
        self.updates = state["updates"]

    def top_indices(self, k: int = 10) -> list[int]:
        order = torch.argsort(self.probs, descending=True, stable=True)
        return [int(i) for i in order[:k]]


def _teacher_entropy_terms(
    teacher: SplitModel,
    x_aug: torch.Tensor,
    clean_means: list[torch.Tensor],
    lambda1: float,
    batch_stats: bool,
) -> torch.Tensor:
    """Per-sample loss_aug values; grads flow only through x_aug."""
    with batch_stats_mode(teacher, batch_stats, update_running=False):
        z, means = teacher.encoder(x_aug, return_block_means=True)
        probs = torch.softmax(teacher.head(z), dim=1)
    neg_entropy = (probs * torch.log(probs.clamp(min=1e-8))).sum(dim=1)
    shift = torch.zeros_like(neg_entropy)
    for mu_aug, mu_clean in zip(means, clean_means):
        shift = shift + ((mu_aug - mu_clean) ** 2).sum(dim=1)
    shift = shift / len(clean_means)
    return neg_entropy + lambda1 * shift


def clean_block_means(
    teacher: SplitModel, x: torch.Tensor, batch_stats: bool = True
) -> list[torch.Tensor]:
    with torch.no_grad(), batch_stats_mode(teacher, batch_stats, update_running=False):
        _, means = teacher.encoder(x, return_block_means=True)
    return [m.detach() for m in means]


def loss_aug(
    teacher: SplitModel,
    x: torch.Tensor,
    subpolicy: SubPolicy,
    magnitudes: torch.Tensor,
    lambda1: float = 1.0,
    batch_stats: bool = True,
) -> torch.Tensor:
    """Mean augmentation loss of one sub-policy on a batch."""
    clean = clean_block_means(teacher, x, batch_stats)
    x_aug = apply_subpolicy(x, subpolicy, magnitudes)
    terms = _teacher_entropy_terms(teacher, x_aug, clean, lambda1, batch_stats)
    return terms.mean()


def score_gradient_p(probs: torch.Tensor, index: int, loss_value: float) -> torch.Tensor:
    """Score-function term loss * grad_P log p_index = (loss/p_index) e_index.

    This is the whole P-gradient of a sampled evaluation: the loss depends
    on P only through which sub-policy was drawn, so the pathwise term for
    P vanishes.
    """
    delta_p = torch.zeros_like(probs)
    delta_p[index] = float(loss_value) / float(probs[index])
    return delta_p


def estimate_gradient(
    policy: PolicyState,
    index: int,
    loss_value: torch.Tensor,
    mag_grad: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Single-draw estimate (delta_P, delta_M) for one sampled sub-policy.

    delta_M holds the pathwise magnitude gradient in the sampled row; the
    score term for M is zero because the sampling probability does not
    depend on M.
    """
    delta_p = score_gradient_p(policy.probs, index, float(loss_value))
    delta_m = torch.zeros_like(policy.mags)
    delta_m[index] = mag_grad
    return delta_p, delta_m


def update_policy(
    policy: PolicyState,
    teacher: SplitModel,
    x: torch.Tensor,
    generator: torch.Generator,
    lambda1: float = 1.0,
    batch_stats: bool = True,
) -> tuple[torch.Tensor, dict]:
    """One projected descent step on [P, M] from a batch of images.

    Samples a sub-policy per image from the current P, augments, evaluates
    the per-sample losses in one teacher forward, accumulates the
    score-function gradient, steps with rate gamma/B, projects P back onto
    the floored simplex and clamps M.  Returns the augmented batch (sampled
    before the update, detached) and a small info dict.
    """
    b = x.shape[0]
    if b < 1:
        raise ValueError("empty batch")
    idx = policy.sample_indices(b, generator)
    mags_leaf = policy.mags[idx].clone().requires_grad_(True)
    clean = clean_block_means(teacher, x, batch_stats)

    pieces = []
    for j in range(b):
        sub = policy.subpolicies[int(idx[j])]
        pieces.append(apply_subpolicy(x[j : j + 1], sub, mags_leaf[j : j + 1]))
    x_aug = torch.cat(pieces, dim=0)

    losses = _teacher_entropy_terms(teacher, x_aug, clean, lambda1, batch_stats)
    losses.sum().backward(inputs=[mags_leaf])
    mag_grads = mags_leaf.grad.detach()
    losses_d = losses.detach()

    delta_p = torch.zeros_like(policy.probs)
    delta_m = torch.zeros_like(policy.mags)
    for j in range(b):
        i = int(idx[j])
        delta_p[i] += float(losses_d[j]) / float(policy.probs[i])
        delta_m[i] += mag_grads[j]
        policy.sample_counts[i] += 1

    step = policy.gamma / b
    policy.probs = project_to_floored_simplex(policy.probs - step * delta_p, policy.prob_floor)
    policy.mags = (policy.mags - step * delta_m).clamp(0.0, 1.0)
    policy.updates += 1
    policy.check_valid()

    info = {
        "mean_loss_aug": float(losses_d.mean()),
        "sampled_indices": idx.tolist(),
    }
    return x_aug.detach(), info
