"""Experiment harness: config files in, run directories out.

A run config is a YAML mapping with three path keys (dataset, checkpoint,
out) plus method and any AdaptationConfig field.  Validation happens
before any compute.  Finished runs write the tables and figures of
:mod:`ttakit.reporting`; interrupted runs can be resumed from the run
state file saved in the output directory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .data import load_dataset
from .engine import METHODS, AdaptationConfig, AdaptationEngine
from .models import batch_stats_mode, load_checkpoint
from .reporting import write_report

RUN_STATE_FILE = "run_state.pt"


@dataclass
class RunConfig:
    dataset: str
    checkpoint: str
    out: str
    method: str = "tesla"
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not Path(self.dataset).is_dir():
            raise FileNotFoundError(f"dataset directory not found: {self.dataset}")
        if not Path(self.checkpoint).is_file():
            raise FileNotFoundError(f"checkpoint not found: {self.checkpoint}")


PATH_KEYS = ("dataset", "checkpoint", "out")


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse a YAML run config; overrides (CLI flags) win over file values."""
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ValueError(f"run config {path} must be a mapping")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    missing = [k for k in ("dataset", "checkpoint", "out") if k not in raw]
    if missing:
        raise ValueError(f"run config is missing required key(s): {', '.join(missing)}")
    method = raw.pop("method", "tesla")
    paths = {k: str(raw.pop(k)) for k in PATH_KEYS}
    adaptation = AdaptationConfig.from_dict(raw)
    return RunConfig(method=method, adaptation=adaptation, **paths)


def run_experiment(
    cfg: RunConfig, resume: bool = False, stop_after_batches: int | None = None
) -> dict:
    """Execute one adaptation run end to end; returns the summary dict.

    With stop_after_batches the run halts early, saves its state into the
    output directory and returns a stub summary; a later call with
    resume=True picks up exactly where it stopped.
    """
    images, labels = load_dataset(cfg.dataset)
    source = load_checkpoint(cfg.checkpoint)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    state_path = out_dir / RUN_STATE_FILE

    if resume:
        if not state_path.is_file():
            raise FileNotFoundError(f"no run state to resume at {state_path}")
        engine, state = AdaptationEngine.resume(source, state_path)
        if engine.method != cfg.method or engine.cfg != cfg.adaptation:
            raise ValueError("run state does not match the requested configuration")
        report = engine.run(
            images, labels, _resume=state,
            stop_after_batches=stop_after_batches, checkpoint_path=state_path,
        )
    else:
        engine = AdaptationEngine(source, cfg.adaptation, method=cfg.method)
        report = engine.run(
            images, labels, stop_after_batches=stop_after_batches, checkpoint_path=state_path
        )
    if report is None:
        return {"status": "checkpointed", "run_state": str(state_path)}
    summary = write_report(report, out_dir, policy=engine.policy)
    return summary


def export_features(checkpoint, data_dir, out_path, batch_size: int = 256) -> int:
    """Write one tab-separated row per image: features then the label.

    Uses the stored normalization statistics, so two identical images give
    identical rows regardless of batch composition.
    """
    from .data import to_batch

    model = load_checkpoint(checkpoint)
    images, labels = load_dataset(data_dir)
    x_all = to_batch(images)
    rows = []
    with torch.no_grad(), batch_stats_mode(model, False):
        for start in range(0, x_all.shape[0], batch_size):
            rows.append(model.forward(x_all[start : start + batch_size], mode="features"))
    feats = torch.cat(rows).numpy().astype(np.float64)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    header = "\t".join([f"f{i}" for i in range(feats.shape[1])] + ["label"])
    lines = [header]
    for i in range(feats.shape[0]):
        lines.append("\t".join(f"{v:.8g}" for v in feats[i]) + f"\t{int(labels[i])}")
    out_path.write_text("\n".join(lines) + "\n")
    return feats.shape[0]
