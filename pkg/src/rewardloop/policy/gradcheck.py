"""Central finite-difference check of the PPO loss gradient."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import PolicyParams
from .ppo import RolloutBatch, ppo_loss, ppo_loss_value


@dataclass
class GradCheckResult:
    beta: float
    n_params: int
    max_rel_error: float
    max_abs_error: float
    worst_param: str

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def random_fixture(seed: int, batch: int = 32, obs_dim: int = 8, hidden: tuple[int, ...] = (64, 64)):
    """Random policy plus a random rollout batch with teacher actions."""
    rng = np.random.default_rng(seed)
    params = PolicyParams.init(obs_dim, 1, hidden, seed=int(rng.integers(2**31)), log_sigma=rng.uniform(-1.0, 0.5))
    # a non-trivial output layer so the mean network is not nearly constant
    w, b = params.mu[-1]
    params.mu[-1] = (w + 0.3 * rng.standard_normal(w.shape), b + 0.1 * rng.standard_normal(b.shape))
    params.obs_shift = 0.1 * rng.standard_normal(obs_dim)
    params.obs_scale = rng.uniform(0.5, 2.0, obs_dim)
    obs = rng.standard_normal((batch, obs_dim))
    adv = rng.standard_normal(batch)
    rb = RolloutBatch(
        observations=obs,
        actions=rng.normal(0.0, 1.0, (batch, 1)),
        old_log_probs=rng.normal(-1.2, 0.3, batch),
        advantages=(adv - adv.mean()) / adv.std(),
        returns=rng.standard_normal(batch),
        teacher_actions=rng.normal(0.0, 1.0, (batch, 1)),
    )
    return params, rb


def _labels(params: PolicyParams) -> list[str]:
    out = []
    for k in range(len(params.mu)):
        out += [f"mu.W{k}", f"mu.b{k}"]
    out.append("log_sigma")
    for k in range(len(params.value)):
        out += [f"value.W{k}", f"value.b{k}"]
    return out


def finite_difference_grads(
    params: PolicyParams, batch: RolloutBatch, beta: float, h: float = 1e-5, **loss_kw
) -> list[np.ndarray]:
    """Central differences of ``ppo_loss_value``, one parameter at a time.

    Straightforward but slow; ``batched_finite_difference_grads`` computes
    the same quantity with many perturbations per numpy call.
    """
    out = []
    for a in params.trainable():
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            up = ppo_loss_value(params, batch, beta=beta, **loss_kw)
            a[idx] = orig - h
            down = ppo_loss_value(params, batch, beta=beta, **loss_kw)
            a[idx] = orig
            g[idx] = (up - down) / (2.0 * h)
        out.append(g)
    return out


def _stacked_mlp(layers, x: np.ndarray, layer: int, part: str, stack: np.ndarray) -> np.ndarray:
    """Forward pass where layer ``layer``'s weight or bias is replaced by each entry of ``stack``."""
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        if i == layer and part == "W":
            z = np.matmul(h, stack) + b
        elif i == layer:
            z = h @ w + stack[:, None, :]
        else:
            z = h @ w + b
        h = z if i == last else np.tanh(z)
    return h


def _losses(mu, values, log_sigma, batch: RolloutBatch, beta, epsilon=0.2, value_coef=0.5, full_kl=False):
    """PPO loss written out directly; broadcasts over leading axes of the inputs."""
    a = batch.actions
    sigma = np.exp(log_sigma)
    logp = np.sum(-log_sigma - 0.5 * np.log(2 * np.pi) - 0.5 * ((a - mu) / sigma) ** 2, axis=-1)
    r = np.exp(logp - batch.old_log_probs)
    A = batch.advantages
    surrogate = np.minimum(r * A, np.clip(r, 1 - epsilon, 1 + epsilon) * A)
    loss = -surrogate.mean(axis=-1) + value_coef * ((values - batch.returns) ** 2).mean(axis=-1)
    if beta > 0:
        dist = np.sum((batch.teacher_actions - mu) ** 2 / (2 * sigma**2), axis=-1)
        if full_kl:
            dist = dist + np.sum(log_sigma + 0.5 * np.log(2 * np.pi), axis=-1)
        loss = loss + beta * dist.mean(axis=-1)
    return loss


def _loss_difference(plus, minus, batch: RolloutBatch, beta, epsilon=0.2, value_coef=0.5, full_kl=False):
    """loss(plus) - loss(minus) for two nearby parameter settings.

    ``plus`` and ``minus`` are (mu, values, log_sigma) triples. Every
    component is rearranged so that the small difference is formed before
    multiplying by large quantities (difference of squares, expm1), which
    keeps the round-off proportional to the change rather than to the loss.
    """
    mu_p, v_p, ls_p = plus
    mu_m, v_m, ls_m = minus
    a, A, R = batch.actions, batch.advantages, batch.returns
    dls = ls_p - ls_m
    inv_p, inv_m = np.exp(-ls_p), np.exp(-ls_m)
    dinv = inv_m * np.expm1(-dls)  # 1/sigma_p - 1/sigma_m

    d_value = value_coef * np.mean((v_p - v_m) * (v_p + v_m - 2.0 * R), axis=-1)

    e_p, e_m = a - mu_p, a - mu_m
    de = mu_m - mu_p  # e_p - e_m
    z_p, z_m = e_p * inv_p, e_m * inv_m
    dz = de * inv_p + e_m * dinv
    dlogp = np.sum(-dls - 0.5 * dz * (z_p + z_m), axis=-1)
    logp_m = np.sum(-ls_m - 0.5 * np.log(2 * np.pi) - 0.5 * z_m**2, axis=-1)
    r_m = np.exp(logp_m - batch.old_log_probs)
    r_p = r_m * np.exp(dlogp)
    dr = r_m * np.expm1(dlogp)
    s_p = np.minimum(r_p * A, np.clip(r_p, 1 - epsilon, 1 + epsilon) * A)
    s_m = np.minimum(r_m * A, np.clip(r_m, 1 - epsilon, 1 + epsilon) * A)
    unclipped = (s_p == r_p * A) & (s_m == r_m * A)
    ds = np.where(unclipped, A * dr, s_p - s_m)
    d_clip = -np.mean(ds, axis=-1)

    d_teacher = np.zeros_like(d_clip)
    if beta > 0:
        t_p, t_m = batch.teacher_actions - mu_p, batch.teacher_actions - mu_m
        # t_p^2/(2 s_p^2) - t_m^2/(2 s_m^2)
        dt = de * (t_p + t_m) * 0.5 * inv_p**2 + t_m**2 * 0.5 * (inv_p + inv_m) * dinv
        dist = np.sum(dt, axis=-1)
        if full_kl:
            dist = dist + np.sum(dls, axis=-1)
        d_teacher = beta * np.mean(dist, axis=-1)
    return d_clip + d_value + d_teacher


def batched_finite_difference_grads(
    params: PolicyParams, batch: RolloutBatch, beta: float, h: float = 1e-5, chunk: int = 256, **loss_kw
) -> list[np.ndarray]:
    """Central differences evaluated ``chunk`` perturbations at a time.

    The loss is recomputed from scratch by a direct vectorised
    implementation (checked against ``ppo_loss_value`` first) and the two
    sides are differenced with ``_loss_difference``.
    """
    x = (batch.observations - params.obs_shift) * params.obs_scale
    mu0, _ = _plain(params.mu, x)
    v0, _ = _plain(params.value, x)
    base = _losses(mu0, v0[:, 0], params.log_sigma[None, :], batch, beta, **loss_kw)
    reference = ppo_loss_value(params, batch, beta=beta, **loss_kw)
    if abs(base - reference) > 1e-12 * max(1.0, abs(reference)):
        raise AssertionError(f"direct loss {base!r} disagrees with ppo_loss {reference!r}")

    out = []
    for net, k, part in _targets(params):
        if net == "log_sigma":
            arr = params.log_sigma
        else:
            layers = params.mu if net == "mu" else params.value
            arr = layers[k][0 if part == "W" else 1]
        flat = arr.reshape(-1)
        g = np.zeros(flat.size)
        for start in range(0, flat.size, chunk):
            idx = np.arange(start, min(start + chunk, flat.size))
            rows = np.arange(len(idx))
            sides, steps = [], np.zeros(len(idx))
            for sign in (1.0, -1.0):
                stack = np.repeat(flat[None, :], len(idx), axis=0)
                stack[rows, idx] = flat[idx] + sign * h
                steps = steps + sign * stack[rows, idx]
                stack = stack.reshape((len(idx),) + arr.shape)
                if net == "log_sigma":
                    sides.append((mu0[None], v0[None, :, 0], stack[:, None, :]))
                elif net == "mu":
                    sides.append((_stacked_mlp(params.mu, x, k, part, stack), v0[:, 0], params.log_sigma))
                else:
                    sides.append((mu0, _stacked_mlp(params.value, x, k, part, stack)[..., 0], params.log_sigma))
            # divide by the step actually taken after rounding
            g[idx] = _loss_difference(sides[0], sides[1], batch, beta, **loss_kw) / steps
        out.append(g.reshape(arr.shape))
    return out


def _plain(layers, x):
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        h = z if i == len(layers) - 1 else np.tanh(z)
    return h, None


def _targets(params: PolicyParams):
    """(network, layer, part) in ``PolicyParams.trainable`` order."""
    out = []
    for k in range(len(params.mu)):
        out += [("mu", k, "W"), ("mu", k, "b")]
    out.append(("log_sigma", 0, ""))
    for k in range(len(params.value)):
        out += [("value", k, "W"), ("value", k, "b")]
    return out


def check_gradients(
    params: PolicyParams, batch: RolloutBatch, beta: float, h: float = 1e-5, **loss_kw
) -> GradCheckResult:
    _, grads, _ = ppo_loss(params, batch, beta=beta, **loss_kw)
    numeric = batched_finite_difference_grads(params, batch, beta, h, **loss_kw)
    worst, worst_name, worst_abs, n = 0.0, "", 0.0, 0
    for name, a, b in zip(_labels(params), grads.trainable(), numeric):
        err = np.abs(a - b)
        den = np.maximum(np.abs(a), np.abs(b))
        # pure relative error; entries that are exactly zero on both sides agree
        rel = np.where(den > 0, err / np.where(den > 0, den, 1.0), 0.0)
        n += a.size
        worst_abs = max(worst_abs, float(err.max()))
        if rel.max() > worst:
            worst, worst_name = float(rel.max()), name
    return GradCheckResult(beta, n, worst, worst_abs, worst_name)


def run_suite(n_batches: int = 10, betas: tuple[float, ...] = (0.0, 5.0), seed: int = 0) -> list[GradCheckResult]:
    results = []
    for k in range(n_batches):
        params, batch = random_fixture(seed + k)
        for beta in betas:
            results.append(check_gradients(params, batch, beta))
    return results
