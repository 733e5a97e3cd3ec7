import numpy as np
import pytest

from app.core.config import get_settings, parse_experiment
from app.models.pretrained import PretrainedModel
from app.schemas.world import GmmSpec, NoiseSchedule
from app.services.online_loop import run_method

TINY_CONFIG = """\
name: tiny
world:
  gmm:
    weights: [0.5, 0.5]
    means: [[-1.5], [1.5]]
    covariances: [[[0.3]], [[0.3]]]
  schedule:
    b_min: 0.1
    b_max: 20.0
    T: 1.0
    n_steps: 10
  reward:
    kind: gaussian_bump
    bumps:
      - center: [1.5]
        width: 0.5
        height: 1.0
  noise_std: 0.1
  budget: 40
method:
  name: seiko-ucb
  K: 2
  batch_sizes: [20, 20]
  alpha: 0.1
  features:
    kind: random_fourier
    input_dim: 1
    dim: 16
    bandwidth: 0.5
  bootstrap_heads: 2
  bootstrap:
    epochs: 5
    hidden_widths: [8]
  drift:
    hidden_widths: [8]
    time_embedding_dim: 2
planner:
  n_paths_per_step: 8
  n_opt_steps: 3
  learning_rate: 0.01
evaluation:
  n_samples: 200
  grid:
    lower: [-4.0]
    upper: [4.0]
    cells: [40]
  trajectory_dump: 2
seeds:
  master: 0
"""


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    """Point the output directory at a temporary folder and reset cached settings."""
    monkeypatch.setenv("SEIKO_OUTPUT_DIR", str(tmp_path / "runs"))
    monkeypatch.delenv("SEIKO_THREADS", raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def schedule():
    """Short variance-preserving schedule."""
    return NoiseSchedule(n_steps=10)


@pytest.fixture
def gmm_1d():
    return GmmSpec.isotropic([0.5, 0.5], [[-1.5], [1.5]], [0.3, 0.3])


@pytest.fixture
def model_1d(gmm_1d, schedule):
    """Bimodal one-dimensional pre-trained model."""
    return PretrainedModel(gmm_1d, schedule)


@pytest.fixture
def model_2d(schedule):
    gmm = GmmSpec.isotropic([0.5, 0.5], [[-2.0, 0.0], [2.0, 0.0]], [0.3, 0.3])
    return PretrainedModel(gmm, schedule)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config_text():
    return TINY_CONFIG


@pytest.fixture(scope="session")
def tiny_config():
    """Validated tiny experiment: 1-D, two iterations, a few planner steps."""
    return parse_experiment(TINY_CONFIG, "tiny.yaml")


@pytest.fixture(scope="session")
def tiny_run(tiny_config):
    """One seiko-ucb run of the tiny experiment, shared by read-only tests."""
    return run_method(tiny_config)
