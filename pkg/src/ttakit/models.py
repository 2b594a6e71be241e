"""Student/teacher model pair with a shared frozen classifier head.

The network is split into a convolutional encoder g and a linear head h.
During adaptation only encoder weights move; the head is the same module
object in student and teacher, so both always share one decision boundary.
"""

from __future__ import annotations

import io
import json
from contextlib import contextmanager
from typing import Iterator

import numpy as np
import torch
import torch.nn as nn

CHECKPOINT_FORMAT = "splitmodel-v1"


class CheckpointError(RuntimeError):
    """A parameter checkpoint does not match the expected architecture."""


class NumericsError(RuntimeError):
    """A forward pass produced non-finite activations."""


class ConvEncoder(nn.Module):
    """Stack of conv-BN-ReLU-pool blocks followed by global average pooling."""

    def __init__(self, in_channels: int = 3, widths: tuple[int, ...] = (32, 64, 128)):
        super().__init__()
        blocks = []
        c = in_channels
        for w in widths:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(c, w, kernel_size=3, padding=1),
                    nn.BatchNorm2d(w),
                    nn.ReLU(inplace=True),
                    nn.MaxPool2d(2),
                )
            )
            c = w
        self.blocks = nn.ModuleList(blocks)
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.feature_dim = widths[-1]

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def forward(self, x: torch.Tensor, return_block_means: bool = False):
        """Return pooled features, optionally with per-block channel means.

        Block means are spatial averages of each block's post-activation
        output, one vector of length ``width_l`` per block.  They feed the
        feature-shift regularizer of the augmentation policy.
        """
        means = []
        for block in self.blocks:
            x = block(x)
            if return_block_means:
                means.append(x.mean(dim=(2, 3)))
        z = x.mean(dim=(2, 3))
        if return_block_means:
            return z, means
        return z


class SplitModel(nn.Module):
    """Encoder plus linear classifier head, f = h(g(x))."""

    def __init__(self, encoder: ConvEncoder, head: nn.Linear, image_size: int = 32):
        super().__init__()
        if head.in_features != encoder.feature_dim:
            raise CheckpointError(
                f"head expects {head.in_features} features, encoder yields "
                f"{encoder.feature_dim}"
            )
        self.encoder = encoder
        self.head = head
        self.image_size = image_size

    @property
    def num_classes(self) -> int:
        return self.head.out_features

    def forward(self, x: torch.Tensor, mode: str = "both", check_finite: bool = True):
        """Run the model on a batch.

        mode: "features" -> z, "probs" -> softmax(h(z)), "both" -> (z, probs).
        Batch normalization behaviour follows the module train/eval state;
        use :func:`batch_stats_mode` to switch it explicitly.
        """
        if x.dim() != 4:
            raise ValueError(f"expected a [B,C,H,W] batch, got shape {tuple(x.shape)}")
        if mode not in ("features", "probs", "both"):
            raise ValueError(f"unknown forward mode {mode!r}")
        z = self.encoder(x)
        if check_finite and not torch.isfinite(z).all():
            raise NumericsError(self._locate_nonfinite(x))
        if mode == "features":
            return z
        probs = torch.softmax(self.head(z), dim=1)
        if check_finite and not torch.isfinite(probs).all():
            raise NumericsError("non-finite values in classifier head output")
        if mode == "probs":
            return probs
        return z, probs

    def _locate_nonfinite(self, x: torch.Tensor) -> str:
        # rerun block by block to name the first offending layer
        with torch.no_grad():
            h = x
            for i, block in enumerate(self.encoder.blocks):
                h = block(h)
                if not torch.isfinite(h).all():
                    return f"non-finite activations in encoder block {i}"
        return "non-finite activations in pooled encoder output"

    def parameter_vector(self) -> torch.Tensor:
        """Flat copy of all parameters, in state-dict order."""
        with torch.no_grad():
            return torch.cat([p.detach().reshape(-1).clone() for p in self.parameters()])

    def head_bytes(self) -> bytes:
        """Serialized head parameters, for byte-identity checks."""
        buf = io.BytesIO()
        arrays = {k: v.detach().cpu().numpy() for k, v in self.head.state_dict().items()}
        np.savez(buf, **arrays)
        return buf.getvalue()


@contextmanager
def batch_stats_mode(
    model: nn.Module, enabled: bool, update_running: bool = True
) -> Iterator[None]:
    """Temporarily put BatchNorm layers in batch-statistics (train) mode.

    enabled=False keeps the stored running statistics fixed (eval mode).
    update_running=False normalizes with batch statistics but leaves the
    stored running statistics and batch counters untouched, so the forward
    has no side effect on model state.
    """
    was_training = model.training
    bns: list[nn.modules.batchnorm._BatchNorm] = []
    saved: list[tuple[float | None, torch.Tensor | None]] = []
    if enabled and not update_running:
        bns = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
        for bn in bns:
            counter = bn.num_batches_tracked
            saved.append((bn.momentum, None if counter is None else counter.clone()))
            bn.momentum = 0.0
    model.train(enabled)
    try:
        yield
    finally:
        model.train(was_training)
        for bn, (momentum, counter) in zip(bns, saved):
            bn.momentum = momentum
            if counter is not None:
                with torch.no_grad():
                    bn.num_batches_tracked.copy_(counter)


def build_model(
    num_classes: int,
    in_channels: int = 3,
    widths: tuple[int, ...] = (32, 64, 128),
    image_size: int = 32,
) -> SplitModel:
    encoder = ConvEncoder(in_channels=in_channels, widths=widths)
    head = nn.Linear(encoder.feature_dim, num_classes)
    return SplitModel(encoder, head, image_size=image_size)


def save_checkpoint(model: SplitModel, path) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "in_channels": model.encoder.in_channels,
        "widths": list(model.encoder.widths),
        "num_classes": model.num_classes,
        "image_size": model.image_size,
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> SplitModel:
    try:
        data = np.load(path, allow_pickle=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "__meta__" not in data:
        raise CheckpointError(f"checkpoint {path} has no metadata record")
    meta = json.loads(bytes(data["__meta__"]).decode())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format')!r}")
    model = build_model(
        num_classes=meta["num_classes"],
        in_channels=meta["in_channels"],
        widths=tuple(meta["widths"]),
        image_size=meta["image_size"],
    )
    state = model.state_dict()
    missing = [k for k in state if k not in data]
    if missing:
        raise CheckpointError(f"checkpoint {path} is missing layer {missing[0]!r}")
    new_state = {}
    for k, ref in state.items():
        arr = data[k]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(
                f"checkpoint layer {k!r} has shape {tuple(arr.shape)}, "
                f"expected {tuple(ref.shape)}"
            )
        new_state[k] = torch.from_numpy(arr.copy()).to(ref.dtype)
    model.load_state_dict(new_state)
    model.eval()
    return model


class ModelPair:
    """Student and EMA teacher built from one source model.

    The classifier head is shared by reference and frozen; the teacher
    encoder is a deep copy updated as theta_t <- alpha*theta_t +
    (1-alpha)*theta_s after every student step.  BatchNorm running
    statistics follow the same exponential average; the integer batch
    counter is copied from the student.
    """

    def __init__(self, source: SplitModel, alpha: float):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0,1], got {alpha}")
        self.alpha = float(alpha)
        self.student = source
        teacher_encoder = ConvEncoder(
            in_channels=source.encoder.in_channels, widths=source.encoder.widths
        )
        teacher_encoder.load_state_dict(source.encoder.state_dict())
        self.teacher = SplitModel(teacher_encoder, source.head, image_size=source.image_size)
        for p in self.teacher.encoder.parameters():
            p.requires_grad_(False)
        for p in source.head.parameters():
            p.requires_grad_(False)
        self._head_fingerprint = source.head_bytes()

    @classmethod
    def from_checkpoint(cls, path, alpha: float) -> "ModelPair":
        return cls(load_checkpoint(path), alpha)

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        return [p for p in self.student.encoder.parameters() if p.requires_grad]

    @torch.no_grad()
    def ema_update(self) -> None:
        a = self.alpha
        s_enc, t_enc = self.student.encoder, self.teacher.encoder
        for ps, pt in zip(s_enc.parameters(), t_enc.parameters()):
            pt.mul_(a).add_(ps, alpha=1.0 - a)
        for bs, bt in zip(s_enc.buffers(), t_enc.buffers()):
            if bt.dtype.is_floating_point:
                bt.mul_(a).add_(bs, alpha=1.0 - a)
            else:
                bt.copy_(bs)

    def check_head_intact(self) -> bool:
        return self.student.head_bytes() == self._head_fingerprint
