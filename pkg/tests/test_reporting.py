"""Report writer: tables parse back, figures are real PNGs."""

import numpy as np
import pytest
import torch

from ttakit.engine import AdaptationConfig, AdaptationEngine
from ttakit.models import build_model
from ttakit.reporting import write_report


@pytest.fixture(scope="module")
def finished_run():
    torch.manual_seed(21)
    source = build_model(4, widths=(8, 16), image_size=16)
    cfg = AdaptationConfig(
        protocol="N-M", epochs=2, batch_size=8, num_weak_views=2, alpha=0.9, seed=0
    )
    engine = AdaptationEngine(source, cfg, method="tesla")
    rng = np.random.default_rng(3)
    imgs = rng.uniform(0.1, 0.9, size=(16, 16, 16, 3)).astype(np.float32)
    labels = rng.integers(0, 4, size=16)
    report = engine.run(imgs, labels)
    return engine, report


def read_tsv(path):
    lines = path.read_text().splitlines()
    header = lines[0].split("\t")
    return header, [dict(zip(header, row.split("\t"))) for row in lines[1:]]


def test_write_report_creates_all_artifacts(finished_run, tmp_path):
    engine, report = finished_run
    summary = write_report(report, tmp_path, policy=engine.policy)
    assert (tmp_path / "summary.tsv").is_file()
    header, rows = read_tsv(tmp_path / "summary.tsv")
    assert header == ["key", "value"]
    keys = {r["key"] for r in rows}
    assert {"method", "error_rate", "ece", "brier", "nll"} <= keys
    assert summary["method"] == "tesla"


def test_batches_table_one_row_per_batch(finished_run, tmp_path):
    engine, report = finished_run
    write_report(report, tmp_path, policy=engine.policy)
    header, rows = read_tsv(tmp_path / "batches.tsv")
    assert len(rows) == len(report.batch_records) == 4  # 2 epochs x 2 batches
    assert {"epoch", "batch", "size", "loss", "loss_pl", "loss_kd"} <= set(header)
    for row in rows:
        float(row["loss"])  # parseable numbers


def test_reliability_table_consistent(finished_run, tmp_path):
    engine, report = finished_run
    write_report(report, tmp_path, policy=engine.policy)
    header, rows = read_tsv(tmp_path / "reliability_bins.tsv")
    assert header == ["bin_low", "bin_high", "count", "mean_confidence", "accuracy"]
    assert len(rows) == 10
    assert sum(int(r["count"]) for r in rows) == 16


def test_policy_table_full_space_per_epoch(finished_run, tmp_path):
    engine, report = finished_run
    write_report(report, tmp_path, policy=engine.policy)
    header, rows = read_tsv(tmp_path / "policy_history.tsv")
    assert len(rows) == 2 * engine.policy.size
    probs_epoch0 = [float(r["prob"]) for r in rows if r["epoch"] == "0"]
    assert sum(probs_epoch0) == pytest.approx(1.0, abs=1e-6)
    assert rows[0]["subpolicy"] == "AutoContrast+Equalize"


def test_figures_are_png(finished_run, tmp_path):
    engine, report = finished_run
    write_report(report, tmp_path, policy=engine.policy)
    for name in ("reliability_diagram.png", "policy_probs.png", "losses.png"):
        data = (tmp_path / name).read_bytes()
        assert data[:8] == b"\x89PNG\r\n\x1a\n", name
        assert len(data) > 1000


def test_restricted_diagram_range(finished_run, tmp_path):
    engine, report = finished_run
    write_report(report, tmp_path, policy=engine.policy, diagram_range=(0.0, 0.5))
    header, rows = read_tsv(tmp_path / "reliability_bins.tsv")
    assert float(rows[-1]["bin_high"]) == pytest.approx(0.5)
    assert len(rows) == 10


def test_unlabeled_report_skips_reliability(tmp_path):
    torch.manual_seed(2)
    source = build_model(4, widths=(8, 16), image_size=16)
    cfg = AdaptationConfig(batch_size=8, num_weak_views=2, seed=0)
    engine = AdaptationEngine(source, cfg, method="bn_stats")
    imgs = np.random.default_rng(0).uniform(0.2, 0.8, (8, 16, 16, 3)).astype(np.float32)
    report = engine.run(imgs, labels=None)
    summary = write_report(report, tmp_path, policy=None)
    assert "error_rate" not in summary
    assert not (tmp_path / "reliability_bins.tsv").exists()
    assert (tmp_path / "summary.tsv").is_file()
