import pytest

from adaknn.config import ExperimentConfig
from adaknn.experiments import Suite


def small_config(**overrides) -> ExperimentConfig:
    """A seeded configuration small enough for unit tests."""
    cfg = ExperimentConfig()
    values = {
        "task.seed": "3",
        "task.n_general": "3000",
        "task.n_train": "150",
        "task.n_dev": "120",
        "task.n_test": "60",
        "encoder.seed": "1",
        "datastore.ivf_seed": "2",
        "datastore.n_centroids": "8",
        "metak.seed": "4",
        "metak.steps": "200",
        "metak.hidden": "8",
        "knn.K": "8",
    }
    values.update(overrides)
    for dotted, raw in values.items():
        section, key = dotted.split(".")
        cfg.set(section, key, raw)
    return cfg


@pytest.fixture(scope="session")
def small_suite():
    return Suite(small_config())


def pytest_terminal_summary(terminalreporter):
    import sys

    module = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    if module is None:
        return
    ran = {
        int(r.nodeid.split("::test_c")[1][:2])
        for key in ("passed", "failed", "error")
        for r in terminalreporter.stats.get(key, [])
        if "test_acceptance.py::test_c" in r.nodeid
    }
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ran):
        terminalreporter.write_line(module.RESULTS.get(n, f"criterion {n:2d}: FAIL  did not complete"))
