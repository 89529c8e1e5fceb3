import json
import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure the repo root is importable even when pytest is invoked directly.
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import rsdkit  # noqa: E402
from rsdlstm import PredictionTrace  # noqa: E402
from synthsurg import build_workflow_spec, generate_dataset  # noqa: E402

# A schema-valid config sized for seconds-long end-to-end runs: tiny
# surgeries (time_scale 0.05), a handful of iterations per stage.
MINIMAL_CONFIG = {
    "version": 1,
    "dataset": {"preset": "cholec", "n_surgeries": 24, "seed": 3, "time_scale": 0.05},
    "splits": {"ratios": [0.3333333333333333, 0.3333333333333333, 0.08333333333333333, 0.25], "folds": 1, "seed": 5},
    "encoder": {
        "iterations": 6,
        "batch_size": 16,
        "eval_every": 3,
        "lr0": 0.05,
        "momentum": 0.9,
        "weight_decay": 0.0005,
        "decay_factor": 10,
        "decay_every": 2000,
        "hidden_sizes": [16, 16],
        "dropout": 0.1,
    },
    "lstm": {
        "iterations": 4,
        "eval_every": 2,
        "lr0": 0.01,
        "momentum": 0.9,
        "weight_decay": 0.01,
        "decay_factor": 10,
        "decay_every": 1000,
        "hidden_size": 8,
        "dropout": 0.3,
        "s_norm": None,
    },
    "baselines": {"prog_floor": 0.01, "rsd_cap_factor": 3.0},
    "evaluation": {
        "thresholds_min": [5, 10, 15, 20, 25, 30],
        "gt_values_min": [5, 10, 15, 20, 25, 30],
        "scale_with_time_scale": True,
    },
    "experiment": {
        "out_dir": "out",
        "seed": 0,
        "threads": 1,
        "methods": ["naive-median", "progress-derived", "rsdnet"],
        "cell_surgeries": 1,
    },
    "numerics": {"precision": "f32"},
    "logging": {"level": "INFO", "format": "%(message)s", "file": ""},
}


@pytest.fixture(autouse=True)
def _isolate_env(monkeypatch):
    """Clear config-affecting env vars so the host environment can't perturb
    tests."""
    for var in [
        "RSDKIT_THREADS",
        "RSDKIT_OUT_DIR",
        "RSDKIT_PRESET",
        "RSDKIT_TIME_SCALE",
        "RSDKIT_SEED",
        "LOG_LEVEL",
        "LOG_FORMAT",
        "LOG_FILE",
    ]:
        monkeypatch.delenv(var, raising=False)


@pytest.fixture
def config_factory(tmp_path):
    """Return a builder that writes a config dict to a temp file and returns a
    ConfigManager for it."""

    def _make(cfg_dict):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(cfg_dict))
        return rsdkit.ConfigManager(str(path))

    return _make


@pytest.fixture
def config(config_factory):
    """A ConfigManager built from a fresh copy of MINIMAL_CONFIG."""
    return config_factory(json.loads(json.dumps(MINIMAL_CONFIG)))


@pytest.fixture
def config_file(tmp_path):
    """MINIMAL_CONFIG on disk with artifacts rooted under tmp_path."""
    cfg = json.loads(json.dumps(MINIMAL_CONFIG))
    cfg["experiment"]["out_dir"] = str(tmp_path / "out")
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="session")
def presets():
    return rsdkit.PresetManager()


@pytest.fixture(scope="session")
def cholec_spec(presets):
    return build_workflow_spec(presets.get_preset("cholec"))


@pytest.fixture(scope="session")
def small_spec(presets):
    """Cholec workflow compressed to a couple of minutes per surgery."""
    return build_workflow_spec(presets.get_preset("cholec"), time_scale=0.05)


@pytest.fixture(scope="session")
def small_dataset(small_spec):
    return generate_dataset(small_spec, 24, seed=3)


def make_trace(rsd_true, rsd_pred, period_min=1.0, surgery_id="S0000", prog_pred=None):
    """Trace on a clock of `period_min` minutes per frame, ending at rsd_true == 0."""
    rsd_true = np.asarray(rsd_true, dtype=np.float64)
    n = len(rsd_true)
    return PredictionTrace(
        surgery_id=surgery_id,
        rsd_pred=np.asarray(rsd_pred, dtype=np.float64),
        rsd_true=rsd_true,
        elapsed_min=np.arange(1, n + 1) * period_min,
        prog_pred=prog_pred,
    )


def linear_trace(n_frames, period_min=1.0, offset=0.0, surgery_id="S0000"):
    """Ground-truth RSD for an n-frame surgery plus a constant prediction offset."""
    total = n_frames * period_min
    rsd_true = total - np.arange(1, n_frames + 1) * period_min
    return make_trace(rsd_true, rsd_true + offset, period_min, surgery_id)
