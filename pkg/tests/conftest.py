import pytest

from devlore_sim.harness.config import ScenarioConfig
from devlore_sim.harness.engine import Simulation
from devlore_sim.platform import Mode


def booted(mode=Mode.DMI, **kw):
    """A simulation whose guest has booted and gone idle, for driving calls by hand."""
    cfg = ScenarioConfig(mode=mode, workload={"kind": "ticker", "steps": 1}, **kw)
    sim = Simulation(cfg.fresh())
    sim.run()
    return sim


@pytest.fixture
def dmi_sim():
    return booted(Mode.DMI)


@pytest.fixture
def br_sim():
    return booted(Mode.BR)
