import numpy as np
import pytest

from crowdctl import SimConfig, build_theta_table
from crowdctl.sim import Resources

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def cfg():
    return SimConfig()


@pytest.fixture(scope="session")
def table(cfg):
    return build_theta_table(cfg.quality(), cfg.prior, cfg.theta_grid_G)


@pytest.fixture(scope="session")
def resources(cfg):
    res = Resources(cfg)
    res.plan  # build once for the session
    return res


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        tr.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
