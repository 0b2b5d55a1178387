"""From-scratch actor-critic PPO."""
from .algo import HyperParams, RolloutBatch, compute_gae, ppo_loss, ppo_update
from .checkpoint import load_checkpoint, save_checkpoint
from .network import Adam, PolicyParams, RunningNorm, greedy_action, init_params, policy_forward
from .train import TrainResult, read_metrics, train

__all__ = [
    "Adam", "HyperParams", "PolicyParams", "RolloutBatch", "RunningNorm", "TrainResult",
    "compute_gae", "greedy_action", "init_params", "load_checkpoint", "policy_forward",
    "ppo_loss", "ppo_update", "read_metrics", "save_checkpoint", "train",
]
