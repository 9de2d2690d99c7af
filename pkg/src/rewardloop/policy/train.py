"""On-policy PPO training of one reward candidate in the training twin."""
from __future__ import annotations

import csv
import io
import logging
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import seeding
from ..dsl import CompiledProgram, RewardEvalError, RewardProgram, validate_program
from ..envs import OBS_DIM, TRAINING_SCHEMA, EnvConfig, WalkerEnv, frame_to_obs, rollout_batch
from .network import Adam, PolicyParams, mlp_forward, normalize
from .ppo import LOG_SQRT_2PI, RolloutBatch, compute_gae, normalize_advantages, ppo_loss
from .teacher import TeacherPolicy, teacher_act

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PPOConfig:
    n_envs: int = 16
    n_steps: int = 256
    minibatch: int = 256
    epochs: int = 4
    lr: float = 3e-4
    gamma: float = 0.99
    lam: float = 0.95
    epsilon: float = 0.2
    value_coef: float = 0.5
    max_grad_norm: float = 1.0
    hidden: tuple[int, ...] = (64, 64)
    init_log_sigma: float = 0.0
    log_sigma_bounds: tuple[float, float] = (-3.0, 1.0)
    full_kl: bool = False
    max_rejections: int = 3
    return_window: int = 100
    eval_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    eval_commands: tuple[float, ...] = (-0.5, 0.5, 1.0)


class TrainingFailed(Exception):
    pass


@dataclass
class TrainMetrics:
    rows: list[dict[str, float]] = field(default_factory=list)
    final: dict[str, float] = field(default_factory=dict)
    failed: bool = False
    error: str = ""

    def curve(self, key: str = "mean_reward") -> np.ndarray:
        return np.array([r[key] for r in self.rows], dtype=np.float64)

    def to_csv(self) -> str:
        if not self.rows:
            return ""
        keys = list(self.rows[0])
        for r in self.rows[1:]:
            keys += [k for k in r if k not in keys]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: repr(float(r[k])) if k in r else "" for k in keys})
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path: str | Path) -> "TrainMetrics":
        text = Path(path).read_text()
        if not text:
            return cls()
        rows = [{k: float(v) for k, v in r.items() if v != ""} for r in csv.DictReader(text.splitlines())]
        return cls(rows=rows)


def e_train(survival_time: float, velocity_error: float, t_max: float) -> float:
    """Command compliance plus survival: survival/T_max minus mean |v - v_ref|."""
    return survival_time / t_max - velocity_error


def summarize_outcomes(outcomes, t_max: float) -> dict[str, float]:
    keys = (
        "survival_time",
        "mean_velocity_error",
        "mean_heading_error",
        "max_abs_pitch",
        "mean_abs_pitch",
        "max_abs_torque",
        "mean_abs_torque",
    )
    out = {k: float(np.mean([getattr(o, k) for o in outcomes])) for k in keys}
    out["velocity_error"] = out.pop("mean_velocity_error")
    out["heading_error"] = out.pop("mean_heading_error")
    out["e_train"] = e_train(out["survival_time"], out["velocity_error"], t_max)
    return out


def eval_grid(ppo: PPOConfig) -> tuple[list[int], list[tuple[float, float]]]:
    seeds, cmds = [], []
    for s in ppo.eval_seeds:
        for v in ppo.eval_commands:
            seeds.append(int(s))
            cmds.append((float(v), 0.0))
    return seeds, cmds


def mean_policy(params: PolicyParams):
    def act(obs: np.ndarray) -> np.ndarray:
        mu, _ = mlp_forward(params.mu, normalize(params, obs))
        return mu[:, 0]

    return act


def train_candidate(
    env_cfg: EnvConfig,
    program: RewardProgram,
    teacher: TeacherPolicy | None = None,
    beta: float = 0.0,
    seed: int = 0,
    iters: int = 300,
    ppo: PPOConfig = PPOConfig(),
    init_params: PolicyParams | None = None,
    evaluate: bool = True,
) -> tuple[PolicyParams, TrainMetrics]:
    """Train a policy for ``program``; deterministic in ``seed``.

    Raises ``TrainingFailed`` when the reward errors mid-rollout or the
    loss stays non-finite after ``ppo.max_rejections`` step-size halvings.
    """
    report = validate_program(program, env_cfg.schema)
    if not report.ok:
        raise TrainingFailed(f"program does not validate against {env_cfg.schema.name!r}: {report}")
    if beta > 0 and teacher is None:
        raise ValueError("beta > 0 requires a teacher")
    compiled = CompiledProgram(program, env_cfg.schema)
    params = init_params.copy() if init_params is not None else PolicyParams.init(
        OBS_DIM, 1, ppo.hidden, seed=seeding.derive_seed(seed, 0), log_sigma=ppo.init_log_sigma,
        schema_name=TRAINING_SCHEMA.name,
    )
    metrics = TrainMetrics()
    if iters <= 0:
        return params, metrics

    n, T = ppo.n_envs, ppo.n_steps
    rng = np.random.default_rng(seeding.derive_seed(seed, 1))
    episode_count = np.zeros(n, dtype=np.int64)

    def new_episode(i: int) -> tuple[int, tuple[float, float]]:
        es = seeding.derive_seed(seed, seeding.EPISODE, i, int(episode_count[i]))
        episode_count[i] += 1
        c = np.random.default_rng([es, 7])
        return es, (float(c.uniform(*env_cfg.v_ref_range)), float(c.uniform(*env_cfg.w_ref_range)))

    env = WalkerEnv(env_cfg, n, noise_seed=seeding.derive_seed(seed, 2))
    starts = [new_episode(i) for i in range(n)]
    frame = env.reset([s for s, _ in starts], [c for _, c in starts])
    obs = frame_to_obs(env_cfg, frame)

    ep_return = np.zeros(n)
    ep_verr = np.zeros(n)
    ep_len = np.zeros(n, dtype=np.int64)
    returns_buf: deque[float] = deque(maxlen=ppo.return_window)
    surv_buf: deque[float] = deque(maxlen=ppo.return_window)
    verr_buf: deque[float] = deque(maxlen=ppo.return_window)

    opt = Adam(lr=ppo.lr)
    rejections = 0
    it = 0
    lo, hi = ppo.log_sigma_bounds
    while it < iters:
        obs_buf = np.zeros((T, n, OBS_DIM))
        act_buf = np.zeros((T, n))
        logp_buf = np.zeros((T, n))
        val_buf = np.zeros((T, n))
        rew_buf = np.zeros((T, n))
        done_buf = np.zeros((T, n), dtype=bool)
        tea_buf = np.zeros((T, n)) if beta > 0 else None
        term_sums = {name: 0.0 for name in program.term_names}
        sigma = float(np.exp(params.log_sigma[0]))
        for t in range(T):
            x = normalize(params, obs)
            mu, _ = mlp_forward(params.mu, x)
            v, _ = mlp_forward(params.value, x)
            a = mu[:, 0] + sigma * rng.standard_normal(n)
            obs_buf[t] = obs
            act_buf[t] = a
            logp_buf[t] = -params.log_sigma[0] - LOG_SQRT_2PI - 0.5 * ((a - mu[:, 0]) / sigma) ** 2
            val_buf[t] = v[:, 0]
            if tea_buf is not None:
                tea_buf[t] = teacher_act(teacher, obs)[:, 0]
            frame, done, _ = env.step(a)
            try:
                tv = compiled(frame.values)
            except RewardEvalError as exc:
                metrics.failed, metrics.error = True, f"reward error at iteration {it}, step {t}: {exc}"
                raise TrainingFailed(metrics.error) from exc
            rew_buf[t] = tv.total
            done_buf[t] = done
            for name, val in tv.values.items():
                term_sums[name] += float(val.sum())
            s = env.state
            ep_return += tv.total
            ep_verr += np.abs(s.v - s.v_ref)
            ep_len += 1
            if done.any():
                idx = np.flatnonzero(done)
                for i in idx:
                    returns_buf.append(float(ep_return[i]))
                    surv_buf.append(float(s.t[i]))
                    verr_buf.append(float(ep_verr[i] / ep_len[i]))
                fresh = [new_episode(int(i)) for i in idx]
                env.reset_some(idx, [f[0] for f in fresh], [f[1] for f in fresh])
                ep_return[idx] = 0.0
                ep_verr[idx] = 0.0
                ep_len[idx] = 0
                frame = env.observe()
            obs = frame_to_obs(env_cfg, frame)

        last_v, _ = mlp_forward(params.value, normalize(params, obs))
        adv, ret = compute_gae(rew_buf, val_buf, done_buf, ppo.gamma, ppo.lam, last_v[:, 0])
        with np.errstate(over="ignore", invalid="ignore"):
            norm_adv = normalize_advantages(adv.reshape(T * n))
        batch = RolloutBatch(
            observations=obs_buf.reshape(T * n, OBS_DIM),
            actions=act_buf.reshape(T * n, 1),
            old_log_probs=logp_buf.reshape(T * n),
            advantages=norm_adv,
            returns=ret.reshape(T * n),
            teacher_actions=None if tea_buf is None else tea_buf.reshape(T * n, 1),
        )

        snapshot, opt_snapshot = params, replace(opt)
        flat = params.flatten()
        losses = np.zeros(4)
        n_updates = 0
        ok = True
        for _ in range(ppo.epochs):
            perm = rng.permutation(len(batch))
            for start in range(0, len(batch), ppo.minibatch):
                mb = batch.subset(perm[start : start + ppo.minibatch])
                with np.errstate(over="ignore", invalid="ignore"):  # non-finite losses are rejected below
                    loss, grads, info = ppo_loss(params, mb, ppo.epsilon, beta, ppo.value_coef, ppo.full_kl)
                g = grads.flatten()
                if not (np.isfinite(loss) and np.all(np.isfinite(g))):
                    ok = False
                    break
                norm = float(np.linalg.norm(g))
                if norm > ppo.max_grad_norm:
                    g = g * (ppo.max_grad_norm / norm)
                flat = opt.step(flat, g)
                params = params.unflatten(flat)
                params.log_sigma = np.clip(params.log_sigma, lo, hi)
                flat = params.flatten()
                losses += (loss, info.clip, info.value, info.teacher)
                n_updates += 1
            if not ok:
                break
        if not ok:
            rejections += 1
            params, opt = snapshot, opt_snapshot
            opt.lr *= 0.5
            log.warning("non-finite loss at iteration %d; step size halved to %g", it, opt.lr)
            if rejections >= ppo.max_rejections:
                metrics.failed = True
                metrics.error = f"loss non-finite after {rejections} consecutive step-size halvings"
                raise TrainingFailed(metrics.error)
            continue
        rejections = 0
        losses /= max(n_updates, 1)
        steps = T * n
        row = {
            "iteration": float(it),
            "mean_reward": float(np.mean(returns_buf)) if returns_buf else float(np.sum(rew_buf) / n),
            "mean_step_reward": float(rew_buf.mean()),
            "survival_time": float(np.mean(surv_buf)) if surv_buf else float(np.max(env.state.t)),
            "velocity_error": float(np.mean(verr_buf)) if verr_buf else 0.0,
            "episodes": float(len(returns_buf)),
            "loss": float(losses[0]),
            "loss_clip": float(losses[1]),
            "loss_value": float(losses[2]),
            "loss_teacher": float(losses[3]),
            "sigma": float(np.exp(params.log_sigma[0])),
            "lr": float(opt.lr),
        }
        for name, total in term_sums.items():
            row[f"term:{name}"] = total / steps
        metrics.rows.append(row)
        it += 1

    if evaluate:
        eval_cfg = replace(env_cfg, randomize={}, init_noise=0.0)
        seeds, cmds = eval_grid(ppo)
        try:
            outcomes = rollout_batch(eval_cfg, mean_policy(params), program, seeds, cmds)
        except RewardEvalError as exc:
            metrics.failed, metrics.error = True, f"reward error during evaluation: {exc}"
            raise TrainingFailed(metrics.error) from exc
        metrics.final = summarize_outcomes(outcomes, env_cfg.t_max)
    return params, metrics


__all__ = [
    "PPOConfig",
    "TrainMetrics",
    "TrainingFailed",
    "e_train",
    "eval_grid",
    "mean_policy",
    "summarize_outcomes",
    "train_candidate",
]
