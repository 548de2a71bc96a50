import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_run():
    """Stage 1 on the seed-fixed 3-class benchmark, shared by the slow tests."""
    from streamgate.experiments import benchmark_pair, train_perception

    train, test = benchmark_pair(n_train=60, n_test=20, num_frames=200, seed=0)
    return train_perception(train, test, seed=0)


@pytest.fixture(scope="session")
def trained_run(toy_run):
    """``toy_run`` plus a stage-2 shallow gate at the recommended silence weight."""
    from streamgate.experiments import fit_gate

    fit_gate(toy_run, "shallow", layers=4, init="early", seed=0)
    return toy_run


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: one test per acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = rep.nodeid.rsplit("::", 1)[-1]
            if rep.when == "call" and name.startswith("test_criterion_"):
                detail = dict(rep.user_properties).get("detail", "")
                rows.append((int(name.split("_")[2]), outcome, detail))
    if rows:
        terminalreporter.section("acceptance criteria")
        for n, outcome, detail in sorted(rows):
            terminalreporter.write_line(f"CRITERION {n}: {'PASS' if outcome == 'passed' else 'FAIL'}  {detail}")
