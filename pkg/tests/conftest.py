import pytest

from feeplan.planner import OcpConfig, solve_ocp


@pytest.fixture(scope="session")
def reference_plan():
    cfg = OcpConfig()
    return cfg, solve_ocp(cfg)
