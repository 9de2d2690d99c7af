"""Reference reward programs for the walker task."""
from __future__ import annotations

from .dsl import RewardProgram, parse_program

# survival, velocity/heading tracking, and their product as a success term
HUMAN_REWARD_SOURCE = """\
survival: 1.0 * survival_dt
track_lin_vel: 0.02 * exp(-norm2(base_lin_vel - cmd_lin_vel) / 0.25)
track_ang_vel: 0.01 * exp(-norm2(base_ang_vel - cmd_ang_vel) / 0.25)
success: 1.0 * survival_dt * (2.0 * exp(-norm2(base_lin_vel - cmd_lin_vel) / 0.25) + exp(-norm2(base_ang_vel - cmd_ang_vel) / 0.25))
"""

# upright-posture penalty used as a safety term
BALANCE_TERM_SOURCE = "balance: -0.5 * square(pitch)\n"


def human_reward() -> RewardProgram:
    return parse_program(HUMAN_REWARD_SOURCE)


def human_reward_with_balance() -> RewardProgram:
    return parse_program(HUMAN_REWARD_SOURCE + BALANCE_TERM_SOURCE)
