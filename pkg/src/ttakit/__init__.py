"""Test-time adaptation toolkit.

Adapts a source-trained classifier to a shifted test stream without
labels: a student network learns from teacher pseudo-labels refined by a
nearest-neighbor memory, while an online-learned augmentation policy keeps
feeding the student views its teacher finds hard.
"""

__version__ = "0.1.0"

from .engine import AdaptationConfig, AdaptationEngine, AdaptationReport, run_adaptation
from .models import ModelPair, SplitModel, build_model, load_checkpoint, save_checkpoint

__all__ = [
    "AdaptationConfig",
    "AdaptationEngine",
    "AdaptationReport",
    "run_adaptation",
    "ModelPair",
    "SplitModel",
    "build_model",
    "load_checkpoint",
    "save_checkpoint",
    "__version__",
]
