"""League-based training of heterogeneous multi-agent teams with type-shared hypernetwork policies."""
from .env import Arena, ConfigError, ScenarioConfig
from .harness import RunConfig, evaluate, replay, train
from .league import League
from .learner import Learner, LearnerConfig
from .nn import ContractError, DimensionError, TrainingDivergence
from .policy import NetConfig, PolicyGroup

__version__ = "0.1.0"

__all__ = [
    "Arena", "ConfigError", "ContractError", "DimensionError", "League", "Learner", "LearnerConfig",
    "NetConfig", "PolicyGroup", "RunConfig", "ScenarioConfig", "TrainingDivergence", "evaluate",
    "replay", "train",
]
