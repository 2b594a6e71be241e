"""Soft pseudo-label refinement.

Teacher predictions are averaged over several weak views of each image,
then smoothed by a nearest-neighbor lookup in class-balanced FIFO queues of
recent (feature, soft label) pairs.  The sample's own entry is pushed
before querying, so with n=1 and an otherwise empty queue refinement
returns the ensembled label itself.
"""

from __future__ import annotations

from collections import deque

import torch

from .models import SplitModel, batch_stats_mode


class WeakAugmenter:
    """Random horizontal flip plus resized crop, sampled per view.

    crop_scale is the area fraction range of the crop; (1.0, 1.0) with
    flip_prob=0 makes every view the identity.
    """

    def __init__(
        self,
        num_views: int = 5,
        flip_prob: float = 0.5,
        crop_scale: tuple[float, float] = (0.8, 1.0),
    ):
        if num_views < 1:
            raise ValueError("need at least one view")
        if not 0.0 < crop_scale[0] <= crop_scale[1] <= 1.0:
            raise ValueError(f"bad crop scale range {crop_scale}")
        self.num_views = num_views
        self.flip_prob = float(flip_prob)
        self.crop_scale = (float(crop_scale[0]), float(crop_scale[1]))

    def view(self, x: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
        """One random view of the batch (flip then crop-and-resize)."""
        b = x.shape[0]
        dd = {"dtype": torch.float64, "device": x.device}
        flip = torch.rand(b, generator=generator, **dd) < self.flip_prob
        lo, hi = self.crop_scale
        area = lo + (hi - lo) * torch.rand(b, generator=generator, **dd)
        side = torch.sqrt(area)  # square crop, aspect ratio kept at 1
        # crop center offset, in normalized coords, staying inside the image
        max_off = 1.0 - side
        ox = (2.0 * torch.rand(b, generator=generator, **dd) - 1.0) * max_off
        oy = (2.0 * torch.rand(b, generator=generator, **dd) - 1.0) * max_off
        sign = torch.where(flip, -torch.ones_like(side), torch.ones_like(side))
        zero = torch.zeros_like(side)
        theta = torch.stack(
            [
                torch.stack([side * sign, zero, ox], dim=1),
                torch.stack([zero, side, oy], dim=1),
            ],
            dim=1,
        ).to(x.dtype)
        grid = torch.nn.functional.affine_grid(theta, list(x.shape), align_corners=False)
        return torch.nn.functional.grid_sample(
            x, grid, mode="bilinear", padding_mode="zeros", align_corners=False
        )

    def views(self, x: torch.Tensor, generator: torch.Generator) -> list[torch.Tensor]:
        return [self.view(x, generator) for _ in range(self.num_views)]


@torch.no_grad()
def ensemble_weak(
    teacher: SplitModel,
    x: torch.Tensor,
    augmenter: WeakAugmenter,
    generator: torch.Generator,
    batch_stats: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean teacher features and probabilities over the weak views."""
    z_sum = None
    p_sum = None
    for view in augmenter.views(x, generator):
        with batch_stats_mode(teacher, batch_stats, update_running=False):
            z, p = teacher.forward(view, mode="both")
        z_sum = z if z_sum is None else z_sum + z
        p_sum = p if p_sum is None else p_sum + p
    n = augmenter.num_views
    return z_sum / n, p_sum / n


class RefinementQueue:
    """Per-class FIFO queues of (feature, soft label) pairs.

    Entries land in the queue of their soft label's argmax class (first
    index wins ties).  refine() averages the soft labels of the n nearest
    stored features by cosine distance over all classes together; when
    fewer than n entries exist, all of them are used.
    """

    def __init__(self, num_classes: int, capacity: int, distance: str = "cosine"):
        if num_classes < 2:
            raise ValueError("need at least two classes")
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        if distance != "cosine":
            raise ValueError(f"unsupported distance {distance!r}")
        self.num_classes = num_classes
        self.capacity = capacity
        self.distance = distance
        self._queues: list[deque] = [deque(maxlen=capacity) for _ in range(num_classes)]

    def __len__(self) -> int:
        return sum(len(q) for q in self._queues)

    def class_sizes(self) -> list[int]:
        return [len(q) for q in self._queues]

    def enqueue(self, feature: torch.Tensor, soft_label: torch.Tensor) -> int:
        if feature.dim() != 1 or soft_label.dim() != 1:
            raise ValueError("enqueue takes a single feature vector and soft label")
        if soft_label.shape[0] != self.num_classes:
            raise ValueError(
                f"soft label has {soft_label.shape[0]} entries, expected {self.num_classes}"
            )
        cls = int(torch.argmax(soft_label))
        self._queues[cls].append(
            (feature.detach().to(torch.float32).clone(), soft_label.detach().to(torch.float32).clone())
        )
        return cls

    def _stacked(self) -> tuple[torch.Tensor, torch.Tensor]:
        feats, labels = [], []
        for q in self._queues:
            for z, y in q:
                feats.append(z)
                labels.append(y)
        return torch.stack(feats), torch.stack(labels)

    def refine(self, feature: torch.Tensor, n_neighbors: int) -> torch.Tensor:
        """Mean soft label of the n nearest stored entries (cosine distance)."""
        if len(self) == 0:
            raise RuntimeError("cannot refine against an empty queue")
        if n_neighbors < 1:
            raise ValueError("n_neighbors must be positive")
        feats, labels = self._stacked()
        q = feature.detach().to(torch.float32)
        denom = feats.norm(dim=1) * q.norm() + 1e-12
        dist = 1.0 - (feats @ q) / denom
        n = min(n_neighbors, feats.shape[0])
        order = torch.argsort(dist, stable=True)  # stable: insertion order breaks ties
        picked = labels[order[:n]]
        return picked.mean(dim=0)

    def state_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "capacity": self.capacity,
            "distance": self.distance,
            "entries": [[(z.clone(), y.clone()) for z, y in q] for q in self._queues],
        }

    def load_state_dict(self, state: dict) -> None:
        if state["num_classes"] != self.num_classes or state["capacity"] != self.capacity:
            raise ValueError("queue shape mismatch in saved state")
        self._queues = [deque(maxlen=self.capacity) for _ in range(self.num_classes)]
        for cls, entries in enumerate(state["entries"]):
            for z, y in entries:
                self._queues[cls].append((z.clone(), y.clone()))


def refine_batch(
    queue: RefinementQueue,
    features: torch.Tensor,
    soft_labels: torch.Tensor,
    n_neighbors: int,
) -> torch.Tensor:
    """Enqueue-then-refine each sample in order (streaming semantics).

    Earlier samples of the batch are visible to later ones, and each query
    sees its own just-pushed entry.
    """
    refined = []
    for j in range(features.shape[0]):
        queue.enqueue(features[j], soft_labels[j])
        refined.append(queue.refine(features[j], n_neighbors))
    return torch.stack(refined)
