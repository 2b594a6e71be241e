"""Streaming adaptation engine.

Drives a student/teacher pair over batches of unlabeled test images under
one of two protocols: a single online pass ("N-O", predictions recorded
batch by batch as adaptation runs) or multiple epochs over the full set
("N-M", final predictions from a frozen-statistics pass at the end).

Per-batch stage order of the full method:
  1. plr      ensemble weak views, enqueue, refine soft pseudo-labels
  2. policy   sample-and-update the adversarial augmentation policy
  3. student  one optimizer step on the combined objective
  4. teacher  exponential moving average update
  5. predict  record predictions (before stage 1 instead when configured)

Baselines share the same loop with reduced steps: source_only (no
updates), bn_stats (batch statistics only), entropy_min (prediction
entropy descent on BatchNorm affine parameters), pl_hard (cross-entropy
to the model's own hard labels).
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import metrics as metrics_mod
from .losses import BatchPredictions, loss_kd, loss_pl, prediction_entropy
from .models import ModelPair, SplitModel, batch_stats_mode, load_checkpoint
from .plr import RefinementQueue, WeakAugmenter, ensemble_weak, refine_batch
from .policy import PolicyState, update_policy

METHODS = ("tesla", "source_only", "entropy_min", "pl_hard", "bn_stats")
PROTOCOLS = ("N-O", "N-M")

RUN_STATE_FORMAT = "runstate-v1"


class NaNAbortError(RuntimeError):
    """Adaptation hit a non-finite loss and stopped."""


@dataclass
class AdaptationConfig:
    protocol: str = "N-O"
    epochs: int = 1
    batch_size: int = 128
    learning_rate: float = 1e-3
    alpha: float = 0.99
    lambda1: float = 1.0
    lambda2: float = 1.0
    gamma: float = 0.1
    subpolicy_dim: int = 2
    num_weak_views: int = 5
    flip_prob: float = 0.5
    crop_scale: tuple[float, float] = (0.8, 1.0)
    n_neighbors: int = 1
    queue_size: int = 1
    seed: int = 0
    eval_model: str = "student"  # which member of the pair predicts
    predict_before_update: bool = False  # record predictions pre-adaptation
    batch_stats: bool = True  # normalize with current-batch statistics
    prob_floor: float = 1e-4

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.protocol == "N-O" and self.epochs != 1:
            raise ValueError("the online protocol runs exactly one epoch")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0,1]")
        if self.n_neighbors < 1 or self.queue_size < 1:
            raise ValueError("n_neighbors and queue_size must be positive")
        if self.eval_model not in ("student", "teacher"):
            raise ValueError("eval_model must be 'student' or 'teacher'")
        if min(self.learning_rate, self.gamma, self.lambda1, self.lambda2) < 0:
            raise ValueError("rates and loss weights must be non-negative")
        self.crop_scale = (float(self.crop_scale[0]), float(self.crop_scale[1]))

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown adaptation option(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class AdaptationReport:
    method: str
    protocol: str
    config: dict
    probs: np.ndarray  # final predictions, [S,K]
    labels: np.ndarray | None
    batch_records: list[dict] = field(default_factory=list)
    epoch_summaries: list[dict] = field(default_factory=list)
    policy_history: list[dict] = field(default_factory=list)
    elapsed_s: float = 0.0

    def summary(self, num_bins: int = 10) -> dict:
        out = {
            "method": self.method,
            "protocol": self.protocol,
            "seed": self.config.get("seed"),
            "epochs": self.config.get("epochs"),
            "batch_size": self.config.get("batch_size"),
            "n_samples": int(self.probs.shape[0]),
            "elapsed_s": round(self.elapsed_s, 3),
        }
        if self.labels is not None:
            out.update(metrics_mod.summarize(self.probs, self.labels, num_bins=num_bins))
        return out


class AdaptationEngine:
    """Owns all mutable adaptation state for one run."""

    def __init__(self, source: SplitModel, cfg: AdaptationConfig, method: str = "tesla"):
        if method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {method!r}")
        self.cfg = cfg
        self.method = method
        self.pair = ModelPair(source, cfg.alpha)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.stage_hook: Callable[[str, int], None] | None = None

        self.policy: PolicyState | None = None
        self.queue: RefinementQueue | None = None
        self.augmenter: WeakAugmenter | None = None
        self.optimizer: torch.optim.Optimizer | None = None

        if method == "tesla":
            self.policy = PolicyState(
                num_ops=cfg.subpolicy_dim, gamma=cfg.gamma, prob_floor=cfg.prob_floor
            )
            self.queue = RefinementQueue(self.pair.student.num_classes, cfg.queue_size)
            self.augmenter = WeakAugmenter(
                num_views=cfg.num_weak_views,
                flip_prob=cfg.flip_prob,
                crop_scale=cfg.crop_scale,
            )
            self.optimizer = torch.optim.Adam(
                self.pair.trainable_parameters(), lr=cfg.learning_rate
            )
        elif method == "entropy_min":
            self.optimizer = torch.optim.Adam(self._bn_affine_params(), lr=cfg.learning_rate)
        elif method == "pl_hard":
            self.optimizer = torch.optim.Adam(
                self.pair.trainable_parameters(), lr=cfg.learning_rate
            )

    def _bn_affine_params(self) -> list[torch.nn.Parameter]:
        params = []
        for m in self.pair.student.encoder.modules():
            if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
                params += [m.weight, m.bias]
        return params

    def _hook(self, stage: str, batch_index: int) -> None:
        if self.stage_hook is not None:
            self.stage_hook(stage, batch_index)

    def _eval_model(self) -> SplitModel:
        return self.pair.student if self.cfg.eval_model == "student" else self.pair.teacher

    @torch.no_grad()
    def _predict(self, x: torch.Tensor) -> torch.Tensor:
        model = self._eval_model()
        use_batch = self.cfg.batch_stats and self.method != "source_only"
        with batch_stats_mode(model, use_batch, update_running=False):
            return model.forward(x, mode="probs")

    def _check_finite(self, loss: torch.Tensor, batch_index: int, context: str) -> None:
        if not torch.isfinite(loss):
            raise NaNAbortError(
                f"non-finite {context} loss at batch {batch_index} "
                f"(method {self.method}, seed {self.cfg.seed})"
            )

    # --- per-method batch steps -------------------------------------------

    def _step_tesla(self, x: torch.Tensor, batch_index: int) -> dict:
        cfg = self.cfg
        self._hook("plr", batch_index)
        z_ens, p_ens = ensemble_weak(
            self.pair.teacher, x, self.augmenter, self.generator, batch_stats=cfg.batch_stats
        )
        pseudo = refine_batch(self.queue, z_ens, p_ens, cfg.n_neighbors)

        self._hook("policy", batch_index)
        x_aug, pol_info = update_policy(
            self.policy,
            self.pair.teacher,
            x,
            self.generator,
            lambda1=cfg.lambda1,
            batch_stats=cfg.batch_stats,
        )

        self._hook("student", batch_index)
        student = self.pair.student
        with batch_stats_mode(student, cfg.batch_stats, update_running=True):
            p_clean = student.forward(x, mode="probs")
            p_aug = student.forward(x_aug, mode="probs")
        batch = BatchPredictions(p_clean, p_aug, pseudo)
        pl = loss_pl(batch.student_probs, batch.pseudo_labels)
        kd = loss_kd(batch.student_probs_aug, batch.pseudo_labels).mean()
        loss = pl + cfg.lambda2 * kd
        self._check_finite(loss, batch_index, "adaptation")
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()

        self._hook("teacher", batch_index)
        self.pair.ema_update()
        return {
            "loss": float(loss.detach()),
            "loss_pl": float(pl.detach()),
            "loss_kd": float(kd.detach()),
            "loss_aug": pol_info["mean_loss_aug"],
        }

    def _step_entropy_min(self, x: torch.Tensor, batch_index: int) -> dict:
        student = self.pair.student
        with batch_stats_mode(student, self.cfg.batch_stats, update_running=True):
            probs = student.forward(x, mode="probs")
        loss = prediction_entropy(probs).mean()
        self._check_finite(loss, batch_index, "entropy")
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return {"loss": float(loss.detach())}

    def _step_pl_hard(self, x: torch.Tensor, batch_index: int) -> dict:
        student = self.pair.student
        with torch.no_grad(), batch_stats_mode(student, self.cfg.batch_stats, update_running=False):
            hard = student.forward(x, mode="probs").argmax(dim=1)
        with batch_stats_mode(student, self.cfg.batch_stats, update_running=True):
            z = student.encoder(x)
            logits = student.head(z)
        loss = torch.nn.functional.cross_entropy(logits, hard)
        self._check_finite(loss, batch_index, "pseudo-label")
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return {"loss": float(loss.detach())}

    def _step_bn_stats(self, x: torch.Tensor, batch_index: int) -> dict:
        with torch.no_grad(), batch_stats_mode(self.pair.student, True, update_running=True):
            self.pair.student.forward(x, mode="probs")
        return {}

    def _step_source_only(self, x: torch.Tensor, batch_index: int) -> dict:
        return {}

    def step(self, x: torch.Tensor, batch_index: int = 0) -> tuple[torch.Tensor, dict]:
        """Adapt on one batch and return (predictions, losses)."""
        if x.shape[0] < 1:
            raise ValueError("empty batch")
        pre = self._predict(x) if self.cfg.predict_before_update else None
        info = getattr(self, f"_step_{self.method}")(x, batch_index)
        self._hook("predict", batch_index)
        probs = pre if pre is not None else self._predict(x)
        return probs, info

    # --- full runs --------------------------------------------------------

    def run(
        self,
        images: np.ndarray,
        labels: np.ndarray | None = None,
        stop_after_batches: int | None = None,
        checkpoint_path: str | Path | None = None,
        _resume: dict | None = None,
    ) -> AdaptationReport | None:
        """Adapt over the dataset; returns None if stopped early.

        stop_after_batches counts batches of the current (possibly resumed)
        run; when it trips, state goes to checkpoint_path and the run can
        be continued with resume_run() to an identical end state.
        """
        from .data import to_batch

        x_all = to_batch(images)
        n = x_all.shape[0]
        cfg = self.cfg
        t0 = time.monotonic()

        if _resume is None:
            state = {
                "epoch": 0,
                "cursor": 0,
                "probs": torch.zeros((n, self.pair.student.num_classes)),
                "batch_records": [],
                "epoch_summaries": [],
                "policy_history": [],
                "elapsed_s": 0.0,
            }
        else:
            state = _resume
            if int(_resume["n_samples"]) != n:
                raise ValueError("resumed run sees a different dataset size")

        batches_done = 0
        epoch = state["epoch"]
        while epoch < cfg.epochs:
            order = self._epoch_order(n, epoch)
            cursor = state["cursor"]
            while cursor < n:
                sel = order[cursor : cursor + cfg.batch_size]
                batch_index = cursor // cfg.batch_size
                probs, info = self.step(x_all[sel], batch_index)
                state["probs"][sel] = probs
                rec = {"epoch": epoch, "batch": batch_index, "size": int(len(sel))}
                rec.update(info)
                state["batch_records"].append(rec)
                cursor += cfg.batch_size
                batches_done += 1
                if stop_after_batches is not None and batches_done >= stop_after_batches:
                    state["epoch"], state["cursor"] = epoch, cursor
                    state["elapsed_s"] += time.monotonic() - t0
                    self._save_run_state(checkpoint_path, state, n)
                    return None
            self._end_epoch(epoch, state, labels)
            epoch += 1
            state["epoch"], state["cursor"] = epoch, 0

        final_probs = state["probs"].numpy().copy()
        if cfg.protocol == "N-M":
            final_probs = self._inference_pass(x_all).numpy()
        report = AdaptationReport(
            method=self.method,
            protocol=cfg.protocol,
            config=asdict(cfg),
            probs=final_probs,
            labels=None if labels is None else np.asarray(labels),
            batch_records=state["batch_records"],
            epoch_summaries=state["epoch_summaries"],
            policy_history=state["policy_history"],
            elapsed_s=state["elapsed_s"] + (time.monotonic() - t0),
        )
        return report

    def _epoch_order(self, n: int, epoch: int) -> torch.Tensor:
        if self.cfg.protocol == "N-O":
            return torch.arange(n)
        # multi-epoch: fresh shuffle per epoch, deterministic in (seed, epoch)
        gen = torch.Generator().manual_seed(self.cfg.seed * 100003 + epoch)
        return torch.randperm(n, generator=gen)

    def _end_epoch(self, epoch: int, state: dict, labels) -> None:
        summary = {"epoch": epoch}
        if labels is not None:
            summary.update(
                metrics_mod.summarize(state["probs"].numpy(), np.asarray(labels))
            )
        state["epoch_summaries"].append(summary)
        if self.policy is not None:
            state["policy_history"].append(
                {
                    "epoch": epoch,
                    "probs": self.policy.probs.tolist(),
                    "mags": self.policy.mags.tolist(),
                    "sample_counts": self.policy.sample_counts.tolist(),
                }
            )

    @torch.no_grad()
    def _inference_pass(self, x_all: torch.Tensor) -> torch.Tensor:
        """Full pass with frozen normalization statistics, dataset order."""
        model = self._eval_model()
        outs = []
        with batch_stats_mode(model, False):
            for start in range(0, x_all.shape[0], self.cfg.batch_size):
                outs.append(model.forward(x_all[start : start + self.cfg.batch_size], mode="probs"))
        return torch.cat(outs)

    # --- checkpoint / resume ---------------------------------------------

    def _save_run_state(self, path, state: dict, n: int) -> None:
        if path is None:
            raise ValueError("stop_after_batches needs a checkpoint_path")
        payload = {
            "format": RUN_STATE_FORMAT,
            "method": self.method,
            "config": asdict(self.cfg),
            "n_samples": n,
            "epoch": state["epoch"],
            "cursor": state["cursor"],
            "probs": state["probs"],
            "batch_records": state["batch_records"],
            "epoch_summaries": state["epoch_summaries"],
            "policy_history": state["policy_history"],
            "elapsed_s": state["elapsed_s"],
            "student": self.pair.student.state_dict(),
            "teacher": self.pair.teacher.state_dict(),
            "generator": self.generator.get_state(),
            "optimizer": None if self.optimizer is None else self.optimizer.state_dict(),
            "policy": None if self.policy is None else self.policy.state_dict(),
            "queue": None if self.queue is None else self.queue.state_dict(),
        }
        torch.save(payload, path)

    @classmethod
    def resume(cls, source: SplitModel, path) -> tuple["AdaptationEngine", dict]:
        payload = torch.load(path, weights_only=False)
        if payload.get("format") != RUN_STATE_FORMAT:
            raise ValueError(f"not a run checkpoint: {path}")
        cfg = AdaptationConfig.from_dict(payload["config"])
        engine = cls(source, cfg, method=payload["method"])
        engine.pair.student.load_state_dict(payload["student"])
        engine.pair.teacher.load_state_dict(payload["teacher"])
        engine.generator.set_state(payload["generator"])
        if payload["optimizer"] is not None:
            engine.optimizer.load_state_dict(payload["optimizer"])
        if payload["policy"] is not None:
            engine.policy.load_state_dict(payload["policy"])
        if payload["queue"] is not None:
            engine.queue.load_state_dict(payload["queue"])
        resume_state = {
            "epoch": payload["epoch"],
            "cursor": payload["cursor"],
            "probs": payload["probs"],
            "batch_records": payload["batch_records"],
            "epoch_summaries": payload["epoch_summaries"],
            "policy_history": payload["policy_history"],
            "elapsed_s": payload["elapsed_s"],
            "n_samples": payload["n_samples"],
        }
        return engine, resume_state


def run_adaptation(
    source: SplitModel,
    images: np.ndarray,
    labels: np.ndarray | None,
    cfg: AdaptationConfig,
    method: str = "tesla",
) -> AdaptationReport:
    engine = AdaptationEngine(source, cfg, method=method)
    report = engine.run(images, labels)
    assert report is not None
    return report


def resume_run(
    source: SplitModel, checkpoint: str | Path, images: np.ndarray, labels=None
) -> AdaptationReport:
    engine, state = AdaptationEngine.resume(source, checkpoint)
    report = engine.run(images, labels, _resume=state)
    assert report is not None
    return report
