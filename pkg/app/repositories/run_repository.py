import csv
import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import yaml

from app import __version__
from app.core.errors import ConfigurationError
from app.models.reward_model import save_surrogate
from app.schemas.experiment import ExperimentConfig
from app.services.eval_oracle import empirical_density, grid_centers
from app.services.online_loop import IterationRecord, RunRecord
from app.services.sde_engine import dump_trajectories

logger = logging.getLogger(__name__)

EVALUATION_COLUMNS = [
    "method", "seed", "iteration", "mean_reward", "kl_grid", "kl_pathwise",
    "J_alpha", "diversity", "frac_infeasible", "tv_to_target",
]
DIAGNOSTIC_COLUMNS = ["iteration", "batch_size", "dataset_size", "alpha", "beta", "mean_bonus", "log_det_gram"]
SEED_COMPONENTS = ("sampling", "feedback", "surrogate", "planner", "evaluation")


def _fmt(value) -> str:
    """Exact, locale-free text for CSV cells; empty for missing values."""
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _read_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def content_hash(path: Union[str, Path]) -> str:
    """SHA-256 of a file's content.

    ``.npz`` archives are hashed by array names, dtypes, shapes and bytes,
    since the zip container stores write times.
    """
    path = Path(path)
    digest = hashlib.sha256()
    if path.suffix == ".npz":
        with np.load(path, allow_pickle=False) as archive:
            for name in sorted(archive.files):
                array = archive[name]
                digest.update(f"{name}:{array.dtype.str}:{array.shape}".encode())
                digest.update(np.ascontiguousarray(array).tobytes())
    else:
        digest.update(path.read_bytes())
    return digest.hexdigest()


def evaluation_rows(record: RunRecord) -> List[list]:
    rows = []
    for it in record.iterations:
        report = it.report
        rows.append([
            record.method, record.seed, it.iteration, report.mean_reward, report.kl_grid,
            report.kl_pathwise, report.J_alpha, report.diversity, report.frac_infeasible,
            report.tv_to_target,
        ])
    return rows


class RunRepository:
    """Directory store for one run.

    Layout::

        config.yaml             validated config
        evaluation.csv          one row per iteration
        diagnostics.csv         bonus means, log det of the Gram matrix, KL weights
        comparator.json         value of the best tilted density
        feedback.csv            every query with its iteration tag
        trajectories.csv        first paths of each iteration's model
        iterations/NNN/         samples.csv, training_curve.csv, surrogate.npz, density.csv
        manifest.json           seeds, version, status and content hashes

    Plot data (``training_curves.csv``, ``regret_curve.csv``,
    ``density_overlay.csv``) is derived from these files by :meth:`emit_plot_data`.
    """

    def __init__(self, run_dir: Union[str, Path]):
        self.run_dir = Path(run_dir)

    @property
    def evaluation_path(self) -> Path:
        return self.run_dir / "evaluation.csv"

    @property
    def manifest_path(self) -> Path:
        return self.run_dir / "manifest.json"

    def iteration_dir(self, iteration: int) -> Path:
        return self.run_dir / "iterations" / f"{iteration:03d}"

    def save(self, cfg: ExperimentConfig, record: RunRecord, status: str = "complete") -> Path:
        """Write every artifact of ``record`` and the manifest.

        Returns:
            Path of the manifest
        """
        self.run_dir.mkdir(parents=True, exist_ok=True)
        config_text = yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True)
        (self.run_dir / "config.yaml").write_text(config_text)

        _write_csv(self.evaluation_path, EVALUATION_COLUMNS, evaluation_rows(record))
        _write_csv(self.run_dir / "diagnostics.csv", DIAGNOSTIC_COLUMNS, [
            [it.iteration, it.batch_size, it.dataset_size, it.alpha, it.beta, it.mean_bonus, it.log_det_gram]
            for it in record.iterations
        ])
        comparator = {"alpha": cfg.evaluation.alpha, "comparator": record.comparator}
        (self.run_dir / "comparator.json").write_text(json.dumps(comparator, sort_keys=True, indent=2) + "\n")
        if record.dataset is not None:
            record.dataset.to_csv(self.run_dir / "feedback.csv")

        trajectories = self.run_dir / "trajectories.csv"
        trajectories.unlink(missing_ok=True)
        for it in record.iterations:
            if it.trajectories:
                dump_trajectories(it.trajectories, cfg.world.schedule, trajectories, append=True,
                                  iteration=it.iteration)
            self._save_iteration(it, record, cfg)

        manifest = {
            "artifact_version": __version__,
            "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
            "method": record.method,
            "seeds": {"master": cfg.seeds.master,
                      **{name: cfg.seeds.resolve(name) for name in SEED_COMPONENTS}},
            "status": status,
            "iterations": len(record.iterations),
            "budget": record.budget,
            "queries_used": record.queries_used,
            "files": self._hashes(),
        }
        self.manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
        logger.info("Run saved", extra={"run_dir": str(self.run_dir), "status": status,
                                        "iterations": len(record.iterations)})
        return self.manifest_path

    def _save_iteration(self, it: IterationRecord, record: RunRecord, cfg: ExperimentConfig) -> None:
        out = self.iteration_dir(it.iteration)
        out.mkdir(parents=True, exist_ok=True)
        d = it.samples.shape[1]
        _write_csv(out / "samples.csv", [f"x{k}" for k in range(d)] + ["y"],
                   [list(x) + [y] for x, y in zip(it.samples, it.feedback)])
        _write_csv(out / "training_curve.csv", ["step", "B", "A1", "A2", "objective"], it.curve)
        if it.surrogate is not None:
            save_surrogate(it.surrogate, out / "surrogate.npz")
        grid = cfg.grid()
        if grid is None or record.pre_density is None or it.eval_samples is None:
            return
        empirical = empirical_density(it.eval_samples, grid).flat()
        target = it.target
        centers = grid_centers(grid)
        rows = []
        for cell, center in enumerate(centers):
            rows.append([cell, *center, empirical[cell], record.pre_density.flat()[cell],
                         target.flat()[cell] if target is not None else None])
        _write_csv(out / "density.csv", ["cell"] + [f"x{k}" for k in range(d)] + ["empirical", "pre", "target"],
                   rows)

    def _hashes(self) -> Dict[str, str]:
        files = sorted(p for p in self.run_dir.rglob("*") if p.is_file() and p != self.manifest_path)
        return {p.relative_to(self.run_dir).as_posix(): content_hash(p) for p in files}

    def load_manifest(self) -> dict:
        if not self.manifest_path.exists():
            raise ConfigurationError(f"{self.manifest_path}:1: missing manifest")
        return json.loads(self.manifest_path.read_text())

    def emit_plot_data(self) -> List[Path]:
        """Write tidy long-format CSVs for plotting; output depends only on the run files.

        Raises:
            ConfigurationError: if the run directory lacks ``evaluation.csv``
        """
        if not self.evaluation_path.exists():
            raise ConfigurationError(f"{self.evaluation_path}:1: missing evaluation CSV")
        evaluation = _read_csv(self.evaluation_path)
        written = [self._emit_training_curves(), self._emit_density_overlay()]
        regret = self._emit_regret(evaluation)
        if regret is not None:
            written.append(regret)
        return written

    def _iteration_dirs(self) -> List[Path]:
        root = self.run_dir / "iterations"
        return sorted(p for p in root.iterdir() if p.is_dir()) if root.exists() else []

    def _emit_training_curves(self) -> Path:
        rows = []
        for folder in self._iteration_dirs():
            curve = folder / "training_curve.csv"
            if not curve.exists():
                continue
            for entry in _read_csv(curve):
                for series in ("B", "A1", "A2", "objective"):
                    rows.append([int(folder.name), entry["step"], series, entry[series]])
        path = self.run_dir / "training_curves.csv"
        _write_csv(path, ["iteration", "step", "series", "value"], rows)
        return path

    def _emit_regret(self, evaluation: List[Dict[str, str]]) -> Optional[Path]:
        comparator_file = self.run_dir / "comparator.json"
        comparator = json.loads(comparator_file.read_text()).get("comparator") if comparator_file.exists() else None
        if comparator is None:
            logger.warning("No comparator value; regret curve skipped", extra={"run_dir": str(self.run_dir)})
            return None
        diagnostics = self.run_dir / "diagnostics.csv"
        bonuses = {row["iteration"]: row["mean_bonus"] for row in _read_csv(diagnostics)} if diagnostics.exists() else {}
        rows, values, bonus_sum, have_bonus = [], [], 0.0, True
        for i, row in enumerate(evaluation, start=1):
            values.append(float(row["J_alpha"]))
            bonus = bonuses.get(row["iteration"], "")
            have_bonus = have_bonus and bonus != ""
            bonus_sum += float(bonus) if bonus != "" else 0.0
            rows.append([row["iteration"], comparator - float(np.mean(values)),
                         2.0 * bonus_sum / i if have_bonus else None])
        path = self.run_dir / "regret_curve.csv"
        _write_csv(path, ["iteration", "regret", "statistical_error"], rows)
        return path

    def _emit_density_overlay(self) -> Path:
        rows = []
        header = None
        for folder in self._iteration_dirs():
            density = folder / "density.csv"
            if not density.exists():
                continue
            entries = _read_csv(density)
            coords = [k for k in entries[0] if k.startswith("x")] if entries else []
            header = header or ["iteration", "cell"] + coords + ["density", "value"]
            for name in ("empirical", "pre", "target"):
                for entry in entries:
                    if entry[name] == "":
                        continue
                    rows.append([int(folder.name), entry["cell"], *(entry[c] for c in coords), name, entry[name]])
        path = self.run_dir / "density_overlay.csv"
        _write_csv(path, header or ["iteration", "cell", "density", "value"], rows)
        return path
