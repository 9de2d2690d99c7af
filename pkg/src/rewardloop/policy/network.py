"""Gaussian MLP actor-critic in plain numpy with explicit backprop."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

Layers = list[tuple[np.ndarray, np.ndarray]]

CHECKPOINT_FORMAT = "rewardloop.policy/1"


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.normal(size=(max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    w = q if n_in >= n_out else q.T
    return np.ascontiguousarray(gain * w[:n_in, :n_out])


def init_layers(rng: np.random.Generator, sizes: list[int], out_gain: float) -> Layers:
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = out_gain if i == len(sizes) - 2 else np.sqrt(2.0)
        layers.append((_orthogonal(rng, n_in, n_out, gain), np.zeros(n_out)))
    return layers


@dataclass
class PolicyParams:
    mu: Layers
    log_sigma: np.ndarray
    value: Layers
    obs_shift: np.ndarray
    obs_scale: np.ndarray
    schema_name: str = "walker"

    @classmethod
    def init(
        cls,
        obs_dim: int,
        act_dim: int = 1,
        hidden: tuple[int, ...] = (64, 64),
        seed: int = 0,
        log_sigma: float = 0.0,
        schema_name: str = "walker",
    ) -> "PolicyParams":
        rng = np.random.default_rng(seed)
        sizes = [obs_dim, *hidden]
        return cls(
            mu=init_layers(rng, sizes + [act_dim], 0.01),
            log_sigma=np.full(act_dim, float(log_sigma)),
            value=init_layers(rng, sizes + [1], 1.0),
            obs_shift=np.zeros(obs_dim),
            obs_scale=np.ones(obs_dim),
            schema_name=schema_name,
        )

    @classmethod
    def zeros_like(cls, other: "PolicyParams") -> "PolicyParams":
        return cls(
            mu=[(np.zeros_like(w), np.zeros_like(b)) for w, b in other.mu],
            log_sigma=np.zeros_like(other.log_sigma),
            value=[(np.zeros_like(w), np.zeros_like(b)) for w, b in other.value],
            obs_shift=other.obs_shift.copy(),
            obs_scale=other.obs_scale.copy(),
            schema_name=other.schema_name,
        )

    @property
    def obs_dim(self) -> int:
        return self.mu[0][0].shape[0]

    @property
    def act_dim(self) -> int:
        return self.log_sigma.shape[0]

    def trainable(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order (shared by flatten/unflatten)."""
        out: list[np.ndarray] = []
        for w, b in self.mu:
            out += [w, b]
        out.append(self.log_sigma)
        for w, b in self.value:
            out += [w, b]
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.trainable()])

    def unflatten(self, flat: np.ndarray) -> "PolicyParams":
        arrays, i = [], 0
        for a in self.trainable():
            arrays.append(flat[i : i + a.size].reshape(a.shape).copy())
            i += a.size
        if i != flat.size:
            raise ValueError(f"flat vector has {flat.size} entries, expected {i}")
        n_mu = len(self.mu)
        mu = [(arrays[2 * k], arrays[2 * k + 1]) for k in range(n_mu)]
        log_sigma = arrays[2 * n_mu]
        rest = arrays[2 * n_mu + 1 :]
        value = [(rest[2 * k], rest[2 * k + 1]) for k in range(len(self.value))]
        return PolicyParams(mu, log_sigma, value, self.obs_shift.copy(), self.obs_scale.copy(), self.schema_name)

    def copy(self) -> "PolicyParams":
        return self.unflatten(self.flatten())

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flatten())))


def normalize(params: PolicyParams, obs: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != params.obs_dim:
        raise ValueError(f"observation has {obs.shape[-1]} entries, network expects {params.obs_dim}")
    return (obs - params.obs_shift) * params.obs_scale


def mlp_forward(layers: Layers, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """tanh hidden layers, linear output; cache holds each layer's input."""
    cache = []
    h = x
    for i, (w, b) in enumerate(layers):
        cache.append(h)
        z = h @ w + b
        h = z if i == len(layers) - 1 else np.tanh(z)
    return h, cache


def mlp_backward(layers: Layers, cache: list[np.ndarray], dout: np.ndarray) -> Layers:
    grads: Layers = [None] * len(layers)  # type: ignore[list-item]
    d = dout
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        h_in = cache[i]
        grads[i] = (h_in.T @ d, d.sum(axis=0))
        if i > 0:
            # cache[i] = tanh(z_{i-1})
            d = (d @ w.T) * (1.0 - h_in**2)
    return grads


def policy_forward(params: PolicyParams, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard deviation of the action distribution."""
    x = normalize(params, obs)
    single = x.ndim == 1
    mu, _ = mlp_forward(params.mu, np.atleast_2d(x))
    sigma = np.broadcast_to(np.exp(params.log_sigma), mu.shape)
    if single:
        return mu[0], sigma[0]
    return mu, sigma


def value_forward(params: PolicyParams, obs: np.ndarray) -> np.ndarray:
    x = normalize(params, obs)
    v, _ = mlp_forward(params.value, np.atleast_2d(x))
    return v[:, 0] if x.ndim == 2 else v[0, 0]


def dump_policy(params: PolicyParams) -> str:
    """JSON checkpoint text; floats are written with ``repr`` so loads are bit-exact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "schema": params.schema_name,
        "mu_shapes": [list(w.shape) for w, _ in params.mu],
        "value_shapes": [list(w.shape) for w, _ in params.value],
        "act_dim": params.act_dim,
        "obs_shift": params.obs_shift.tolist(),
        "obs_scale": params.obs_scale.tolist(),
        "params": params.flatten().tolist(),
    }
    return json.dumps(doc)


def save_policy(params: PolicyParams, path: str | Path) -> None:
    Path(path).write_text(dump_policy(params))


def policy_from_dict(doc: dict) -> PolicyParams:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    mu = [(np.zeros(s), np.zeros(s[1])) for s in doc["mu_shapes"]]
    value = [(np.zeros(s), np.zeros(s[1])) for s in doc["value_shapes"]]
    template = PolicyParams(
        mu,
        np.zeros(doc["act_dim"]),
        value,
        np.array(doc["obs_shift"], dtype=np.float64),
        np.array(doc["obs_scale"], dtype=np.float64),
        doc["schema"],
    )
    return template.unflatten(np.array(doc["params"], dtype=np.float64))


def load_policy(path: str | Path) -> PolicyParams:
    return policy_from_dict(json.loads(Path(path).read_text()))


@dataclass
class Adam:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    t: int = 0

    def step(self, flat: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None or self.v is None:
            self.m = np.zeros_like(flat)
            self.v = np.zeros_like(flat)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return flat - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
