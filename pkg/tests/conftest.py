import numpy as np
import pytest

from cake.config import Config, build_bundle


def small_config(**over):
    base = {"data.n_classes": 4, "data.d_x": 16, "data.n_s": 400, "data.n_u": 120, "data.n_test": 200,
            "train.t_max": 60, "train.log_interval": 20, "train.ledger_interval": 20, "train.hidden": 16,
            "generator.iters": 60}
    base.update(over)
    return Config().with_overrides(base)


@pytest.fixture
def small_cfg():
    return small_config()


@pytest.fixture
def small_bundle(small_cfg):
    return build_bundle(small_cfg.data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
