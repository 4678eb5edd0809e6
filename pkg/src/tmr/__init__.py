"""Multi-modal knowledge graph reasoning with inductive entity encoding and adversarial rewards."""

from .config import ConfigError, TrainConfig, desk_config
from .discriminator import Discriminator, sample_demonstrations
from .env import Action, Environment, ReasonerState, Trajectory, beam_infer, rollout, rollout_batch
from .evaluation import evaluate, metrics, rank_query
from .graph import FeatureStore, MultiModalKG, RelationVocab, load_triples, synth_features
from .policy import Reasoner, ReinforceUpdater, score_actions, sample_action
from .rules import Rule, RuleIndex, mine_rules, rule_confidence
from .tair import TairEncoder, encode
from .trainer import Trainer, TrainData, VARIANTS, run_ablation, train
from .ugan import UGAN, fuse

__all__ = [
    "Action", "ConfigError", "Discriminator", "Environment", "FeatureStore", "MultiModalKG", "Reasoner",
    "ReasonerState", "ReinforceUpdater", "RelationVocab", "Rule", "RuleIndex", "TairEncoder", "TrainConfig",
    "TrainData", "Trainer", "Trajectory", "UGAN", "VARIANTS", "beam_infer", "desk_config", "encode", "evaluate",
    "fuse", "load_triples", "metrics", "mine_rules", "rank_query", "rollout", "rollout_batch", "rule_confidence",
    "run_ablation", "sample_action", "sample_demonstrations", "score_actions", "synth_features", "train",
]
