"""Shared fixtures.

The source checkpoint is expensive to train on one CPU core, so it is
cached under /tmp keyed by a fingerprint of the modules that define it;
editing models.py or data.py invalidates the cache automatically.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from ttakit import data as data_mod
from ttakit.corruptions import CorruptionSpec, corrupt_images
from ttakit.models import build_model, load_checkpoint

CACHE = Path(os.environ.get("TTAKIT_TEST_CACHE", "/tmp/ttakit_test_cache"))

TRAIN_COUNT = 4000
TEST_COUNT = 1024
DATA_SEED = 7
SOURCE_EPOCHS = 12


def _code_fingerprint() -> str:
    root = Path(__file__).resolve().parents[1] / "src" / "ttakit"
    h = hashlib.sha256()
    for name in ("models.py", "data.py"):
        h.update((root / name).read_bytes())
    h.update(f"{TRAIN_COUNT}:{DATA_SEED}:{SOURCE_EPOCHS}".encode())
    return h.hexdigest()[:12]


@pytest.fixture(scope="session")
def clean_train():
    return data_mod.make_dataset(TRAIN_COUNT, DATA_SEED)


@pytest.fixture(scope="session")
def clean_test():
    return data_mod.make_dataset(TEST_COUNT, DATA_SEED + 1)


@pytest.fixture(scope="session")
def corrupted_test(clean_test):
    images, labels = clean_test
    spec = CorruptionSpec(name="gaussian_noise", severity=5, seed=11)
    return corrupt_images(images, spec), labels


@pytest.fixture(scope="session")
def source_checkpoint(clean_train):
    CACHE.mkdir(parents=True, exist_ok=True)
    path = CACHE / f"source_{_code_fingerprint()}.npz"
    if not path.exists():
        images, labels = clean_train
        data_mod.train_and_save(images, labels, path, seed=0, epochs=SOURCE_EPOCHS)
    return path


@pytest.fixture
def fresh_source(source_checkpoint):
    """Factory: a new source model instance per call (engines mutate them)."""

    def make():
        return load_checkpoint(source_checkpoint)

    return make


@pytest.fixture
def tiny_model():
    """Small randomly initialized model for fast unit tests."""
    torch.manual_seed(1234)
    return build_model(4, in_channels=3, widths=(8, 16), image_size=16)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def random_probs(rng: np.random.Generator, b: int, k: int) -> np.ndarray:
    """Strictly positive rows on the simplex, float64."""
    logits = rng.normal(size=(b, k)) * 2.0
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)
