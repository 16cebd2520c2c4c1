from typing import Any, Dict

import numpy as np
import pytest

from app.core.config_loader import deep_merge
from app.models.experiments import ExperimentConfig, MixtureSpec
from app.services.datagen import LabeledDataset, generate_mixture

TINY: Dict[str, Any] = {
    "name": "tiny",
    "seed": 5,
    "n_clients": 3,
    "gen_count": 5,
    "data": {"count": 120},
    "diffusion": {
        "timesteps": 10,
        "beta_min": 0.01,
        "beta_max": 0.5,
        "hidden": [8],
        "epoch_scale": None,
        "train": {"epochs": 3, "batch_size": 16},
    },
    "classifier": {"hidden": [8], "epochs": 3, "batch_size": 16},
    "audit": {"mia_size": 10, "samples_per_class": 5},
    "fedavg": {"iters": 3},
    "bvc": {"redraws": 2},
}


def make_config(**overrides: Any) -> ExperimentConfig:
    """几秒内能跑完整个协议的小配置"""
    return ExperimentConfig.model_validate(deep_merge(TINY, overrides))


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    return make_config()


@pytest.fixture
def benchmark_mixture() -> MixtureSpec:
    return MixtureSpec()


@pytest.fixture
def benchmark_data(benchmark_mixture) -> LabeledDataset:
    return generate_mixture(benchmark_mixture, 400, seed=1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240601)


@pytest.fixture(autouse=True)
def isolated_logs(tmp_path_factory, monkeypatch):
    monkeypatch.setenv("LOG_DIR", str(tmp_path_factory.mktemp("logs")))
