"""Twin simulators for a planar wheeled inverted pendulum.

The training twin integrates explicit Euler at the control rate with
per-episode domain randomisation. The deployment twin sub-steps RK4,
delays actions by a few control ticks, perturbs physical parameters by a
fixed offset and adds Gaussian noise to its sensors. Both share the same
control period so reward programs see comparable frames.

Dynamics (u clipped to +/- u_max)::

    dv/dt     = (motor_gain * u - ground_friction * v) / mass
    d2th/dt2  = (g * sin(th) - dv/dt * cos(th)) / pole_length
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .dsl import CompiledProgram, HomomorphismMap, MapEntry, ObservationSchema, RewardProgram, SignalSpec

TRAINING_SCHEMA = ObservationSchema(
    "walker",
    (
        SignalSpec("base_lin_vel", 1, "m/s"),
        SignalSpec("base_ang_vel", 1, "rad/s"),
        SignalSpec("pitch", 1, "rad"),
        SignalSpec("cmd_lin_vel", 1, "m/s"),
        SignalSpec("cmd_ang_vel", 1, "rad/s"),
        SignalSpec("last_action", 1, "N*m"),
        SignalSpec("applied_torque", 1, "N*m"),
        SignalSpec("survival_dt", 1, "s"),
    ),
)

DEPLOYMENT_SCHEMA = ObservationSchema(
    "walker_deploy",
    (
        SignalSpec("odom_lin_vel", 1, "m/s"),
        SignalSpec("imu_ang_vel", 1, "rad/s"),
        SignalSpec("imu_pitch", 1, "rad"),
        SignalSpec("joy_lin_vel", 1, "m/s"),
        SignalSpec("joy_ang_vel", 1, "rad/s"),
        SignalSpec("motor_cmd", 1, "N*m"),
        SignalSpec("motor_torque", 1, "N*m"),
        SignalSpec("alive_dt", 1, "s"),
    ),
)

DEFAULT_MAP = HomomorphismMap(
    tuple(MapEntry(s.name, d.name) for s, d in zip(TRAINING_SCHEMA.signals, DEPLOYMENT_SCHEMA.signals))
)

OBS_DIM = TRAINING_SCHEMA.width

TERMINATIONS = ("time_limit", "fell", "diverged")


@dataclass(frozen=True)
class PhysicsParams:
    mass: float = 1.0
    pole_length: float = 0.5
    pole_inertia: float = 0.0625
    ground_friction: float = 0.1
    motor_gain: float = 1.0
    gravity: float = 9.81
    dt: float = 0.02

    def __post_init__(self) -> None:
        for name in ("mass", "pole_length", "pole_inertia", "dt"):
            if np.any(np.asarray(getattr(self, name)) <= 0):
                raise ValueError(f"{name} must be strictly positive")

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


@dataclass(frozen=True)
class EnvConfig:
    kind: str = "training"
    integrator: str = "euler"
    control_dt: float = 0.02
    nominal: PhysicsParams = PhysicsParams()
    randomize: Mapping[str, float] = field(default_factory=dict)  # relative half-widths
    offsets: Mapping[str, float] = field(default_factory=dict)  # relative offsets
    delay_steps: int = 0
    obs_noise: Mapping[str, float] = field(default_factory=dict)  # by emitted signal name
    theta_fall: float = 0.6
    t_max: float = 10.0
    u_max: float = 3.0
    v_ref_range: tuple[float, float] = (-1.0, 1.0)
    w_ref_range: tuple[float, float] = (0.0, 0.0)
    init_pitch: float = 0.05
    init_noise: float = 0.0
    homomorphism: HomomorphismMap | None = None  # None: emit the training schema

    @property
    def schema(self) -> ObservationSchema:
        return TRAINING_SCHEMA if self.homomorphism is None else DEPLOYMENT_SCHEMA

    @property
    def substeps(self) -> int:
        return max(1, int(round(self.control_dt / self.nominal.dt)))

    @property
    def max_steps(self) -> int:
        return int(round(self.t_max / self.control_dt))


def training_config(**overrides) -> EnvConfig:
    base = EnvConfig(
        kind="training",
        integrator="euler",
        nominal=PhysicsParams(dt=0.02),
        randomize={"mass": 0.2, "motor_gain": 0.15, "ground_friction": 0.3},
    )
    return replace(base, **overrides)


def deployment_config(**overrides) -> EnvConfig:
    base = EnvConfig(
        kind="deployment",
        integrator="rk4",
        nominal=PhysicsParams(dt=0.005),
        offsets={"mass": 0.1, "motor_gain": -0.05, "ground_friction": 0.2},
        delay_steps=2,
        obs_noise={"odom_lin_vel": 0.01, "imu_ang_vel": 0.01, "imu_pitch": 0.01},
        homomorphism=DEFAULT_MAP,
    )
    return replace(base, **overrides)


def real_config(**overrides) -> EnvConfig:
    base = deployment_config(
        offsets={"mass": -0.1, "motor_gain": -0.1, "ground_friction": 0.4},
        obs_noise={"odom_lin_vel": 0.02, "imu_ang_vel": 0.02, "imu_pitch": 0.02},
    )
    return replace(base, **overrides)


def sample_params(cfg: EnvConfig, seed: int) -> PhysicsParams:
    """Physical parameters for one episode; deterministic in ``seed``."""
    p = cfg.nominal.as_dict()
    if cfg.randomize:
        rng = np.random.default_rng([int(seed), 0x5EED])
        for name in sorted(cfg.randomize):
            w = cfg.randomize[name]
            p[name] *= rng.uniform(1.0 - w, 1.0 + w)
    for name, off in cfg.offsets.items():
        p[name] *= 1.0 + off
    return PhysicsParams(**p)


def _stack(params: Sequence[PhysicsParams]) -> PhysicsParams:
    return PhysicsParams(**{f.name: np.array([getattr(p, f.name) for p in params]) for f in fields(PhysicsParams)})


def derivatives(v, theta, omega, u, p: PhysicsParams):
    """Time derivatives of (x, v, theta, omega)."""
    vdot = (p.motor_gain * u - p.ground_friction * v) / p.mass
    wdot = (p.gravity * np.sin(theta) - vdot * np.cos(theta)) / p.pole_length
    return v, vdot, omega, wdot


def integrate(x, v, theta, omega, u, p: PhysicsParams, dt: float, method: str = "euler"):
    """Advance one step of length ``dt`` with a zero-order-hold torque."""
    if method == "euler":
        dx, dv, dth, dw = derivatives(v, theta, omega, u, p)
        return x + dt * dx, v + dt * dv, theta + dt * dth, omega + dt * dw
    if method != "rk4":
        raise ValueError(f"unknown integrator {method!r}")
    k1 = derivatives(v, theta, omega, u, p)
    k2 = derivatives(v + 0.5 * dt * k1[1], theta + 0.5 * dt * k1[2], omega + 0.5 * dt * k1[3], u, p)
    k3 = derivatives(v + 0.5 * dt * k2[1], theta + 0.5 * dt * k2[2], omega + 0.5 * dt * k2[3], u, p)
    k4 = derivatives(v + dt * k3[1], theta + dt * k3[2], omega + dt * k3[3], u, p)
    s = dt / 6.0
    return (
        x + s * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
        v + s * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
        theta + s * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]),
        omega + s * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3]),
    )


def pendulum_energy(theta, omega, p: PhysicsParams):
    """Conserved quantity of the unforced, frictionless pole (J units)."""
    return 0.5 * p.pole_inertia * omega**2 + p.pole_inertia * (p.gravity / p.pole_length) * (1.0 + np.cos(theta))


@dataclass
class ObservationFrame:
    schema: ObservationSchema
    values: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]


@dataclass
class WalkerState:
    """Batched walker state; every array has shape ``(n,)``."""

    x: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    omega: np.ndarray
    t: np.ndarray
    last_action: np.ndarray
    applied: np.ndarray
    queue: np.ndarray  # (n, delay) pending actions, oldest first
    v_ref: np.ndarray
    w_ref: np.ndarray
    params: PhysicsParams
    diverged: np.ndarray

    def copy(self) -> "WalkerState":
        return WalkerState(
            **{f.name: (getattr(self, f.name).copy() if f.name != "params" else self.params) for f in fields(self)}
        )

    def fallen(self, cfg: EnvConfig) -> np.ndarray:
        return (np.abs(self.theta) > cfg.theta_fall) | self.diverged


class WalkerEnv:
    """A batch of ``n`` independent walkers sharing one configuration."""

    def __init__(self, cfg: EnvConfig, n: int = 1, noise_seed: int = 0):
        self.cfg = cfg
        self.n = n
        self.rng = np.random.default_rng([int(noise_seed), 0xD0])
        self.state: WalkerState | None = None

    def check_command(self, v_ref: float, w_ref: float) -> None:
        lo, hi = self.cfg.v_ref_range
        wlo, whi = self.cfg.w_ref_range
        if not (lo <= v_ref <= hi) or not (wlo <= w_ref <= whi):
            raise ValueError(f"command ({v_ref}, {w_ref}) outside configured range")

    def _initial_pitch(self, seeds: Sequence[int]) -> np.ndarray:
        cfg = self.cfg
        theta0 = np.full(len(seeds), cfg.init_pitch)
        if cfg.init_noise > 0:
            theta0 = theta0 + np.array(
                [np.random.default_rng([int(s), 0x1A]).uniform(-cfg.init_noise, cfg.init_noise) for s in seeds]
            )
        return theta0

    def reset(self, seeds: Sequence[int], commands: Sequence[tuple[float, float]]) -> ObservationFrame:
        assert len(seeds) == self.n and len(commands) == self.n
        for v_ref, w_ref in commands:
            self.check_command(v_ref, w_ref)
        cfg = self.cfg
        z = np.zeros(self.n)
        self.state = WalkerState(
            x=z.copy(),
            v=z.copy(),
            theta=self._initial_pitch(seeds),
            omega=z.copy(),
            t=z.copy(),
            last_action=z.copy(),
            applied=z.copy(),
            queue=np.zeros((self.n, cfg.delay_steps)),
            v_ref=np.array([c[0] for c in commands], dtype=np.float64),
            w_ref=np.array([c[1] for c in commands], dtype=np.float64),
            params=_stack([sample_params(cfg, s) for s in seeds]),
            diverged=np.zeros(self.n, dtype=bool),
        )
        return self.observe()

    def reset_some(self, idx: np.ndarray, seeds: Sequence[int], commands: Sequence[tuple[float, float]]) -> None:
        """Re-initialise the walkers at ``idx`` in place."""
        s = self.state
        assert s is not None and len(idx) == len(seeds) == len(commands)
        for v_ref, w_ref in commands:
            self.check_command(v_ref, w_ref)
        idx = np.asarray(idx)
        for name in ("x", "v", "omega", "t", "last_action", "applied", "queue"):
            arr = getattr(s, name).copy()
            arr[idx] = 0.0
            setattr(s, name, arr)
        s.theta = s.theta.copy()
        s.theta[idx] = self._initial_pitch(seeds)
        s.v_ref = s.v_ref.copy()
        s.v_ref[idx] = [c[0] for c in commands]
        s.w_ref = s.w_ref.copy()
        s.w_ref[idx] = [c[1] for c in commands]
        s.diverged = s.diverged.copy()
        s.diverged[idx] = False
        p = {f.name: np.array(getattr(s.params, f.name), dtype=np.float64) for f in fields(PhysicsParams)}
        for k, seed in zip(idx, seeds):
            fresh = sample_params(self.cfg, seed)
            for name in p:
                p[name][k] = getattr(fresh, name)
        s.params = PhysicsParams(**p)

    def observe(self) -> ObservationFrame:
        assert self.state is not None
        return state_tracker(self.cfg, self.state, self.rng)

    def step(self, actions: np.ndarray) -> tuple[ObservationFrame, np.ndarray, np.ndarray]:
        """Advance every walker one control tick.

        Returns the new frame, a termination mask and an array of
        termination causes ('' for walkers still running).
        """
        s = self.state
        assert s is not None
        cfg = self.cfg
        a = np.clip(np.asarray(actions, dtype=np.float64).reshape(self.n), -cfg.u_max, cfg.u_max)
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite action")
        s.last_action = a
        if cfg.delay_steps > 0:
            s.applied = s.queue[:, 0].copy()
            s.queue = np.concatenate([s.queue[:, 1:], a[:, None]], axis=1)
        else:
            s.applied = a
        x, v, th, w = s.x, s.v, s.theta, s.omega
        h = cfg.control_dt / cfg.substeps
        with np.errstate(all="ignore"):
            for _ in range(cfg.substeps):
                x, v, th, w = integrate(x, v, th, w, s.applied, s.params, h, cfg.integrator)
        bad = ~(np.isfinite(x) & np.isfinite(v) & np.isfinite(th) & np.isfinite(w))
        # diverged walkers keep their last finite state so frames stay finite
        s.x = np.where(bad, s.x, x)
        s.v = np.where(bad, s.v, v)
        s.theta = np.where(bad, s.theta, th)
        s.omega = np.where(bad, s.omega, w)
        s.diverged = s.diverged | bad
        s.t = s.t + cfg.control_dt
        fell = np.abs(s.theta) > cfg.theta_fall
        timeout = s.t >= cfg.t_max - 1e-9
        done = s.diverged | fell | timeout
        cause = np.full(self.n, "", dtype=object)
        if done.any():
            cause[timeout] = "time_limit"
            cause[fell] = "fell"
            cause[s.diverged] = "diverged"
        return self.observe(), done, cause


def training_values(cfg: EnvConfig, s: WalkerState) -> dict[str, np.ndarray]:
    alive = ~s.fallen(cfg)
    return {
        "base_lin_vel": s.v[:, None],
        "base_ang_vel": s.omega[:, None],
        "pitch": s.theta[:, None],
        "cmd_lin_vel": s.v_ref[:, None],
        "cmd_ang_vel": s.w_ref[:, None],
        "last_action": s.last_action[:, None],
        "applied_torque": s.applied[:, None],
        "survival_dt": np.where(alive, cfg.control_dt, 0.0)[:, None],
    }


def state_tracker(cfg: EnvConfig, s: WalkerState, rng: np.random.Generator | None = None) -> ObservationFrame:
    """Emit the observation frame for ``s`` in the configuration's schema."""
    vals = training_values(cfg, s)
    if cfg.homomorphism is not None:
        # push forward: source = gain * target + offset
        vals = {e.target: (vals[e.source] - e.offset) / e.gain for e in cfg.homomorphism.entries}
    if cfg.obs_noise:
        if rng is None:
            raise ValueError("noisy configuration needs an rng")
        vals = dict(vals)
        for name in sorted(cfg.obs_noise):
            sigma = cfg.obs_noise[name]
            if sigma > 0:
                vals[name] = vals[name] + rng.normal(0.0, sigma, size=vals[name].shape)
    return ObservationFrame(cfg.schema, vals)


def reset(cfg: EnvConfig, seed: int, command: tuple[float, float]) -> tuple[WalkerState, ObservationFrame]:
    env = WalkerEnv(cfg, 1, noise_seed=seed)
    frame = env.reset([seed], [command])
    assert env.state is not None
    return env.state, frame


def step(
    cfg: EnvConfig, state: WalkerState, action: float, rng: np.random.Generator | None = None
) -> tuple[WalkerState, ObservationFrame, bool, str]:
    """Single-walker functional step; ``state`` is not modified."""
    env = WalkerEnv(cfg, 1)
    if rng is not None:
        env.rng = rng
    env.state = state.copy()
    frame, done, cause = env.step(np.array([action]))
    return env.state, frame, bool(done[0]), str(cause[0])


def frame_to_obs(cfg: EnvConfig, frame: ObservationFrame) -> np.ndarray:
    """Policy input vector (training signal order) for a frame of either twin."""
    vals = frame.values if cfg.homomorphism is None else cfg.homomorphism.pull_back(frame.values)
    return np.concatenate([vals[name] for name in TRAINING_SCHEMA.names], axis=-1)


PolicyFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class Trajectory:
    schema: ObservationSchema
    signals: dict[str, np.ndarray]  # (T, arity) post-step frames
    actions: np.ndarray
    times: np.ndarray
    term_values: dict[str, np.ndarray] = field(default_factory=dict)
    totals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    termination: str = "time_limit"

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class EpisodeOutcome:
    trajectory: Trajectory
    termination: str
    survival_time: float
    mean_velocity_error: float
    mean_heading_error: float
    max_abs_pitch: float
    mean_abs_pitch: float
    max_abs_torque: float
    mean_abs_torque: float
    seed: int = 0
    command: tuple[float, float] = (0.0, 0.0)


def _outcome_stats(cfg: EnvConfig, traj: Trajectory, termination: str, seed: int, command) -> EpisodeOutcome:
    n = len(traj)
    if n == 0:
        return EpisodeOutcome(traj, termination, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, seed, command)
    vals = traj.signals if cfg.homomorphism is None else cfg.homomorphism.pull_back(traj.signals)
    pitch = np.abs(vals["pitch"][:, 0])
    torque = np.abs(vals["applied_torque"][:, 0])
    return EpisodeOutcome(
        trajectory=traj,
        termination=termination,
        survival_time=float(n * cfg.control_dt),
        mean_velocity_error=float(np.mean(np.abs(vals["base_lin_vel"][:, 0] - vals["cmd_lin_vel"][:, 0]))),
        mean_heading_error=float(np.mean(np.abs(vals["base_ang_vel"][:, 0] - vals["cmd_ang_vel"][:, 0]))),
        max_abs_pitch=float(pitch.max()),
        mean_abs_pitch=float(pitch.mean()),
        max_abs_torque=float(torque.max()),
        mean_abs_torque=float(torque.mean()),
        seed=seed,
        command=tuple(command),
    )


def rollout_batch(
    cfg: EnvConfig,
    policy: PolicyFn,
    program: RewardProgram | None,
    seeds: Sequence[int],
    commands: Sequence[tuple[float, float]],
    max_steps: int | None = None,
    noise_seed: int = 0,
) -> list[EpisodeOutcome]:
    """Run one episode per (seed, command) pair side by side.

    Each walker stops recording at its own termination, so no trajectory
    holds a post-termination step. Reward evaluation errors propagate as
    ``RewardEvalError`` carrying the step index.
    """
    from .dsl import RewardEvalError

    n = len(seeds)
    max_steps = cfg.max_steps if max_steps is None else max_steps
    env = WalkerEnv(cfg, n, noise_seed=noise_seed)
    frame = env.reset(seeds, commands)
    compiled = CompiledProgram(program, cfg.schema) if program is not None else None
    names = cfg.schema.names
    rec_sig = {name: np.zeros((max_steps, n, cfg.schema.arity(name))) for name in names}
    rec_act = np.zeros((max_steps, n))
    rec_t = np.zeros((max_steps, n))
    lengths = np.zeros(n, dtype=int)
    causes = np.array(["time_limit"] * n, dtype=object)
    active = np.ones(n, dtype=bool)
    for k in range(max_steps):
        if not active.any():
            break
        obs = frame_to_obs(cfg, frame)
        act = np.asarray(policy(obs), dtype=np.float64).reshape(n)
        frame, done, cause = env.step(act)
        assert env.state is not None
        for name in names:
            rec_sig[name][k, active] = frame.values[name][active]
        rec_act[k, active] = env.state.last_action[active]
        rec_t[k, active] = env.state.t[active]
        lengths[active] = k + 1
        finished = active & done
        causes[finished] = cause[finished]
        active &= ~done
    outcomes = []
    for i in range(n):
        L = lengths[i]
        traj = Trajectory(
            schema=cfg.schema,
            signals={name: rec_sig[name][:L, i].copy() for name in names},
            actions=rec_act[:L, i].copy(),
            times=rec_t[:L, i].copy(),
            termination=str(causes[i]),
        )
        if compiled is not None and L > 0:
            try:
                tv = compiled(traj.signals)
            except RewardEvalError:
                for k in range(L):
                    try:
                        compiled({name: a[k] for name, a in traj.signals.items()})
                    except RewardEvalError as exc:
                        raise RewardEvalError(exc.term, exc.message, step=k) from None
                raise
            traj.term_values = tv.values
            traj.totals = tv.total
        outcomes.append(_outcome_stats(cfg, traj, str(causes[i]), int(seeds[i]), commands[i]))
    return outcomes


def rollout(
    cfg: EnvConfig,
    policy: PolicyFn,
    program: RewardProgram | None,
    seed: int,
    command: tuple[float, float],
    max_steps: int | None = None,
) -> EpisodeOutcome:
    return rollout_batch(cfg, policy, program, [seed], [command], max_steps, noise_seed=seed)[0]


def write_trajectory_csv(traj: Trajectory, path: str | Path) -> None:
    path = Path(path)
    names = traj.schema.names
    header = ["step", "t"]
    for name in names:
        a = traj.schema.arity(name)
        header += [name] if a == 1 else [f"{name}[{i}]" for i in range(a)]
    header += ["action"] + [f"r_{k}" for k in traj.term_values] + ["total"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(traj)):
            row: list[object] = [k, repr(float(traj.times[k]))]
            for name in names:
                row += [repr(float(x)) for x in traj.signals[name][k]]
            row.append(repr(float(traj.actions[k])))
            row += [repr(float(v[k])) for v in traj.term_values.values()]
            row.append(repr(float(traj.totals[k])) if len(traj.totals) else "")
            w.writerow(row)


__all__ = [
    "DEFAULT_MAP",
    "DEPLOYMENT_SCHEMA",
    "TRAINING_SCHEMA",
    "EnvConfig",
    "EpisodeOutcome",
    "ObservationFrame",
    "PhysicsParams",
    "Trajectory",
    "WalkerEnv",
    "WalkerState",
    "deployment_config",
    "derivatives",
    "frame_to_obs",
    "integrate",
    "pendulum_energy",
    "real_config",
    "reset",
    "rollout",
    "rollout_batch",
    "sample_params",
    "state_tracker",
    "step",
    "training_config",
    "write_trajectory_csv",
]
