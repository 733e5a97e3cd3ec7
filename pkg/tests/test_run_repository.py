import csv
import dataclasses
import json

import pytest

from app.core.errors import ConfigurationError
from app.repositories.run_repository import (
    EVALUATION_COLUMNS,
    RunRepository,
    content_hash,
)
from app.services.online_loop import RunRecord


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


@pytest.fixture
def saved_run(tmp_path, tiny_config, tiny_run):
    repo = RunRepository(tmp_path / "run")
    repo.save(tiny_config, tiny_run)
    return repo


def test_save_writes_run_files(saved_run):
    """Test the top-level layout and the evaluation header."""
    run_dir = saved_run.run_dir
    for name in ("config.yaml", "evaluation.csv", "diagnostics.csv", "comparator.json",
                 "feedback.csv", "trajectories.csv", "manifest.json"):
        assert (run_dir / name).exists(), name
    rows = read_rows(saved_run.evaluation_path)
    assert rows[0] == EVALUATION_COLUMNS
    assert [row[2] for row in rows[1:]] == ["1", "2"]
    for k in (1, 2):
        folder = saved_run.iteration_dir(k)
        assert (folder / "samples.csv").exists()
        assert (folder / "training_curve.csv").exists()
        assert (folder / "surrogate.npz").exists()


def test_manifest_contents(saved_run, tiny_config):
    """Test status, seeds, query count and file hashes in the manifest."""
    manifest = saved_run.load_manifest()
    assert manifest["status"] == "complete"
    assert manifest["method"] == "seiko-ucb"
    assert manifest["iterations"] == 2
    assert manifest["queries_used"] == 40 and manifest["budget"] == 40
    assert manifest["seeds"]["master"] == 0
    assert manifest["seeds"]["planner"] == tiny_config.seeds.resolve("planner")
    assert "manifest.json" not in manifest["files"]
    for name, digest in manifest["files"].items():
        assert content_hash(saved_run.run_dir / name) == digest


def test_saved_files_are_reproducible(tmp_path, tiny_config, tiny_run):
    """Test that saving the same record twice gives the same hashes."""
    first = RunRepository(tmp_path / "a")
    second = RunRepository(tmp_path / "b")
    first.save(tiny_config, tiny_run)
    second.save(tiny_config, tiny_run)
    assert first.load_manifest()["files"] == second.load_manifest()["files"]


def test_density_csv(saved_run, tiny_config):
    """Test one density row per grid cell with all three densities."""
    rows = read_rows(saved_run.iteration_dir(1) / "density.csv")
    assert rows[0] == ["cell", "x0", "empirical", "pre", "target"]
    assert len(rows) == 1 + tiny_config.grid().cells[0]
    assert all(row[4] != "" for row in rows[1:])


def test_resave_does_not_duplicate_trajectories(saved_run, tiny_config, tiny_run):
    """Test that trajectories.csv is rewritten, not appended to, on a second save."""
    path = saved_run.run_dir / "trajectories.csv"
    before = len(read_rows(path))
    saved_run.save(tiny_config, tiny_run)
    assert len(read_rows(path)) == before
    assert before == 1 + 2 * 2 * (tiny_config.world.schedule.n_steps + 1)


def test_emit_plot_data(saved_run):
    """Test the three plot files and that emitting twice gives the same bytes."""
    paths = saved_run.emit_plot_data()
    assert sorted(p.name for p in paths) == ["density_overlay.csv", "regret_curve.csv", "training_curves.csv"]
    contents = {p.name: p.read_bytes() for p in paths}
    again = saved_run.emit_plot_data()
    assert {p.name: p.read_bytes() for p in again} == contents
    regret = read_rows(saved_run.run_dir / "regret_curve.csv")
    assert regret[0] == ["iteration", "regret", "statistical_error"]
    assert len(regret) == 3
    assert all(row[2] != "" for row in regret[1:])


def test_regret_skipped_without_comparator(tmp_path, tiny_config, tiny_run):
    """Test that a run without a comparator emits no regret curve."""
    record = dataclasses.replace(tiny_run, comparator=None)
    repo = RunRepository(tmp_path / "run")
    repo.save(tiny_config, record)
    assert json.loads((repo.run_dir / "comparator.json").read_text())["comparator"] is None
    names = [p.name for p in repo.emit_plot_data()]
    assert "regret_curve.csv" not in names


def test_missing_run_files(tmp_path):
    """Test the errors for an empty run directory."""
    repo = RunRepository(tmp_path / "empty")
    with pytest.raises(ConfigurationError):
        repo.emit_plot_data()
    with pytest.raises(ConfigurationError):
        repo.load_manifest()


def test_partial_status(tmp_path, tiny_config):
    """Test that an aborted run is saved with its status."""
    repo = RunRepository(tmp_path / "partial")
    repo.save(tiny_config, RunRecord("seiko-ucb", 0, 40), status="partial")
    manifest = repo.load_manifest()
    assert manifest["status"] == "partial"
    assert manifest["iterations"] == 0
    assert read_rows(repo.evaluation_path) == [EVALUATION_COLUMNS]
