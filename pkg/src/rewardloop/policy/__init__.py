from .network import Adam, PolicyParams, load_policy, policy_forward, save_policy, value_forward
from .ppo import (
    RolloutBatch,
    clip_value_loss,
    compute_gae,
    log_prob,
    normalize_advantages,
    ppo_loss,
    ppo_loss_value,
    teacher_distance,
)
from .teacher import DEFAULT_PD_GAINS, TeacherPolicy, teacher_act
from .train import PPOConfig, TrainingFailed, TrainMetrics, mean_policy, train_candidate

__all__ = [
    "Adam",
    "DEFAULT_PD_GAINS",
    "PPOConfig",
    "PolicyParams",
    "RolloutBatch",
    "TeacherPolicy",
    "TrainMetrics",
    "TrainingFailed",
    "clip_value_loss",
    "compute_gae",
    "load_policy",
    "log_prob",
    "mean_policy",
    "normalize_advantages",
    "policy_forward",
    "ppo_loss",
    "ppo_loss_value",
    "save_policy",
    "teacher_act",
    "teacher_distance",
    "train_candidate",
    "value_forward",
]
