"""Clipped-surrogate PPO loss with a teacher-distance regulariser.

The teacher is treated as a point mass at ``a_ref``. The KL from that
point mass to the diagonal Gaussian policy is
``sum_i log(sqrt(2*pi)*sigma_i) + (a_ref_i - mu_i)**2 / (2*sigma_i**2)``
once the (infinite, parameter-free) self-entropy of the point mass is
discarded. By default only the quadratic part is used as the training
penalty; ``full_kl=True`` keeps the log-sigma part as well.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import PolicyParams, mlp_backward, mlp_forward, normalize

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def log_prob(mu: np.ndarray, sigma: np.ndarray, action: np.ndarray) -> np.ndarray:
    """Diagonal Gaussian log density, summed over the last axis."""
    mu, sigma, action = np.asarray(mu), np.asarray(sigma), np.asarray(action)
    z = (action - mu) / sigma
    return np.sum(-np.log(sigma) - LOG_SQRT_2PI - 0.5 * z * z, axis=-1)


def teacher_distance(mu: np.ndarray, sigma: np.ndarray, a_ref: np.ndarray, full_kl: bool = False) -> np.ndarray:
    mu, sigma, a_ref = np.asarray(mu), np.asarray(sigma), np.asarray(a_ref)
    d = np.sum((a_ref - mu) ** 2 / (2.0 * sigma**2), axis=-1)
    if full_kl:
        d = d + np.sum(np.log(sigma) + LOG_SQRT_2PI, axis=-1)
    return d


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    terminals: np.ndarray,
    gamma: float,
    lam: float,
    last_values: np.ndarray | float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates along axis 0.

    A terminal step bootstraps from zero. ``last_values`` is the value of
    the state following the final step, used when that step is not terminal.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=bool)
    if not (rewards.shape == values.shape == terminals.shape):
        raise ValueError("rewards, values and terminals must share a shape")
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError("gamma and lambda must lie in [0, 1]")
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_value = np.broadcast_to(np.asarray(last_values, dtype=np.float64), rewards.shape[1:])
    running = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        live = 1.0 - terminals[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


@dataclass
class RolloutBatch:
    observations: np.ndarray  # (B, obs_dim)
    actions: np.ndarray  # (B, act_dim)
    old_log_probs: np.ndarray  # (B,)
    advantages: np.ndarray  # (B,)
    returns: np.ndarray  # (B,)
    teacher_actions: np.ndarray | None = None  # (B, act_dim)

    def __post_init__(self) -> None:
        n = len(self.observations)
        arrays = [self.actions, self.old_log_probs, self.advantages, self.returns]
        if self.teacher_actions is not None:
            arrays.append(self.teacher_actions)
        if any(len(a) != n for a in arrays):
            raise ValueError("rollout batch arrays differ in length")

    def __len__(self) -> int:
        return len(self.observations)

    def subset(self, idx: np.ndarray) -> "RolloutBatch":
        return RolloutBatch(
            self.observations[idx],
            self.actions[idx],
            self.old_log_probs[idx],
            self.advantages[idx],
            self.returns[idx],
            None if self.teacher_actions is None else self.teacher_actions[idx],
        )


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def clip_value_loss(
    ratio: np.ndarray, advantages: np.ndarray, values: np.ndarray, returns: np.ndarray, epsilon: float, value_coef: float
) -> tuple[float, float]:
    surr1 = ratio * advantages
    surr2 = np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantages
    clip_loss = -np.mean(np.minimum(surr1, surr2))
    value_loss = value_coef * np.mean((values - returns) ** 2)
    return clip_loss, value_loss


@dataclass
class LossInfo:
    clip: float
    value: float
    teacher: float
    approx_kl: float
    clip_fraction: float


def _forward(params: PolicyParams, batch: RolloutBatch, epsilon: float, beta: float, value_coef: float, full_kl: bool):
    if len(batch) == 0:
        raise ValueError("empty batch")
    if epsilon <= 0 or beta < 0:
        raise ValueError("need epsilon > 0 and beta >= 0")
    if beta > 0 and batch.teacher_actions is None:
        raise ValueError("teacher actions required when beta > 0")
    B = len(batch)
    x = normalize(params, batch.observations)
    mu, mu_cache = mlp_forward(params.mu, x)
    v_out, v_cache = mlp_forward(params.value, x)
    values = v_out[:, 0]
    sigma = np.exp(params.log_sigma)
    act = batch.actions.reshape(B, -1)
    z = (act - mu) / sigma
    logp = np.sum(-params.log_sigma - LOG_SQRT_2PI - 0.5 * z * z, axis=-1)
    ratio = np.exp(logp - batch.old_log_probs)
    clip_loss, value_loss = clip_value_loss(ratio, batch.advantages, values, batch.returns, epsilon, value_coef)
    loss = clip_loss + value_loss
    teacher_term = 0.0
    if beta > 0:
        # skipped entirely at beta == 0 so the vanilla loss is reproduced exactly
        teacher_term = beta * np.mean(teacher_distance(mu, sigma, batch.teacher_actions.reshape(B, -1), full_kl))
        loss = loss + teacher_term
    return loss, (mu, mu_cache, values, v_cache, sigma, z, logp, ratio, clip_loss, value_loss, teacher_term)


def ppo_loss_value(
    params: PolicyParams,
    batch: RolloutBatch,
    epsilon: float = 0.2,
    beta: float = 0.0,
    value_coef: float = 0.5,
    full_kl: bool = False,
) -> float:
    """Loss only, without the backward pass."""
    return float(_forward(params, batch, epsilon, beta, value_coef, full_kl)[0])


def ppo_loss(
    params: PolicyParams,
    batch: RolloutBatch,
    epsilon: float = 0.2,
    beta: float = 0.0,
    value_coef: float = 0.5,
    full_kl: bool = False,
) -> tuple[float, PolicyParams, LossInfo]:
    """Loss and its gradient with respect to every trainable parameter.

    loss = -mean(min(r*A, clip(r)*A)) + value_coef*mean((V - R)^2)
           + beta*mean(teacher_distance)
    """
    loss, cache = _forward(params, batch, epsilon, beta, value_coef, full_kl)
    mu, mu_cache, values, v_cache, sigma, z, logp, ratio, clip_loss, value_loss, teacher_term = cache
    B = len(batch)
    A = batch.advantages

    # d clip_loss / d logp: gradient flows only where the unclipped branch is the min
    unclipped = ratio * A <= np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * A
    dlogp = np.where(unclipped, -A * ratio / B, 0.0)
    dmu = dlogp[:, None] * (z / sigma)
    dlog_sigma = np.sum(dlogp[:, None] * (z * z - 1.0), axis=0)

    if beta > 0:
        diff = batch.teacher_actions.reshape(B, -1) - mu
        dmu = dmu - (beta / B) * diff / sigma**2
        dlog_sigma = dlog_sigma - (beta / B) * np.sum(diff**2 / sigma**2, axis=0)
        if full_kl:
            dlog_sigma = dlog_sigma + beta

    dvalues = (value_coef * 2.0 / B) * (values - batch.returns)
    g_mu = mlp_backward(params.mu, mu_cache, dmu)
    g_v = mlp_backward(params.value, v_cache, dvalues[:, None])
    grads = PolicyParams(g_mu, dlog_sigma, g_v, params.obs_shift, params.obs_scale, params.schema_name)
    info = LossInfo(
        clip=float(clip_loss),
        value=float(value_loss),
        teacher=float(teacher_term),
        approx_kl=float(np.mean(batch.old_log_probs - logp)),
        clip_fraction=float(np.mean(np.abs(ratio - 1.0) > epsilon)),
    )
    return float(loss), grads, info
