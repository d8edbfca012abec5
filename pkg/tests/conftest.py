import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from maintmdp import casestudy, solver  # noqa: E402
from maintmdp.config import DEFAULT_CONFIG, load_config  # noqa: E402

REDUCED_CONFIG = DEFAULT_CONFIG.with_name("config_reduced.yaml")
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line[1])


@pytest.fixture(scope="session")
def default_cfg():
    return load_config()


@pytest.fixture(scope="session")
def reduced_cfg():
    return load_config(REDUCED_CONFIG)


@pytest.fixture(scope="session")
def small_case(default_cfg):
    """Case study with three exposure states and a 12-year horizon (27^3 joint states)."""
    return casestudy.build_case_study(default_cfg.with_overrides(n_tau=3, horizon=12))


@pytest.fixture(scope="session")
def reduced_case(reduced_cfg):
    return casestudy.build_case_study(reduced_cfg)


@pytest.fixture(scope="session")
def reduced_solution(reduced_case):
    return solver.tensor_value_iteration(reduced_case.mdp)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_config(directory, edits=None, base=DEFAULT_CONFIG):
    """Copy of a bundled config with nested ``edits`` applied; data paths made absolute."""
    import yaml

    doc = yaml.safe_load(Path(base).read_text())
    data = Path(base).parent
    for c in doc["components"]:
        c["hazard_curve"] = str(data / c["hazard_curve"])
        c["fragility_model"] = str(data / c["fragility_model"])
    doc["mdp"]["scenarios"] = str(data / doc["mdp"]["scenarios"])
    for key, value in (edits or {}).items():
        if isinstance(value, dict):
            doc[key].update(value)
        else:
            doc[key] = value
    path = Path(directory) / "config.yaml"
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return path


SMALL_EDITS = {
    "mdp": {"n_tau": 3, "horizon": 6},
    "fragility": {"n_trajectories": 300, "horizon": 20},
    "simulation": {"n_runs": 300, "snapshot_years": [1, 3, 6]},
}
