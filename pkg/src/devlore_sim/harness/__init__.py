from .config import ConfigError, ScenarioConfig, from_dict, load
from .engine import RunResult, Simulation, compare, replay, run

__all__ = ["ConfigError", "RunResult", "ScenarioConfig", "Simulation", "compare", "from_dict",
           "load", "replay", "run"]
