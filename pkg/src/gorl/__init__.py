"""Guided offline reinforcement learning with per-sample constraint degrees."""

from .agents import CQL, IQL, SACBC, TD3BC, ConstraintAdapter, make_adapter
from .datasets import OfflineDataset, load, mix, save
from .envs import EnvSpec, default_spec, evaluate_policy, generate_dataset, make_policy, solve_lqr
from .guidance import GuidingNet, constant_guide, make_guiding_net
from .numeric import MlpGrad, MlpParams, Rng
from .stats import ScoreRefs, paired_t_test, t_cdf
from .trainer import RunLog, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CQL", "IQL", "SACBC", "TD3BC", "ConstraintAdapter", "make_adapter",
    "OfflineDataset", "load", "mix", "save",
    "EnvSpec", "default_spec", "evaluate_policy", "generate_dataset", "make_policy", "solve_lqr",
    "GuidingNet", "constant_guide", "make_guiding_net",
    "MlpGrad", "MlpParams", "Rng",
    "ScoreRefs", "paired_t_test", "t_cdf",
    "RunLog", "TrainConfig", "train",
]
