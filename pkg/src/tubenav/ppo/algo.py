"""GAE and the clipped-surrogate PPO update."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .network import NORM_EPS, Adam, PolicyParams, backward, forward, log_softmax


@dataclass(frozen=True)
class HyperParams:
    lr: float = 3e-4
    gamma: float = 0.99
    lambda_gae: float = 0.95
    train_batch: int = 13000
    minibatch: int = 1300
    rollout_len: int = 200
    n_workers: int = 13
    entropy_coef: float = 0.003
    clip: float = 0.3
    epochs_per_iter: int = 10
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.clip <= 0.0:
            raise ValueError("clip must be positive")
        if self.train_batch % self.minibatch:
            raise ValueError("minibatch must divide train_batch")

    @classmethod
    def from_section(cls, section) -> "HyperParams":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in vars(section).items() if k in names})


@dataclass
class RolloutBatch:
    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def concat(cls, parts: list["RolloutBatch"]) -> "RolloutBatch":
        return cls(*(np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(cls)))

    def take(self, idx) -> "RolloutBatch":
        return RolloutBatch(*(getattr(self, f.name)[idx] for f in fields(self)))


def compute_gae(rewards, values, dones, gamma: float, lambda_gae: float,
                last_value: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Backward recursion; ``last_value`` bootstraps a truncated final step."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    n = len(rewards)
    if not len(values) == len(dones) == n:
        raise ValueError("rewards, values and dones must have equal length")
    adv = np.zeros(n)
    next_value, next_adv = float(last_value), 0.0
    for t in range(n - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        next_adv = delta + gamma * lambda_gae * live * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def ppo_loss(weights: dict[str, np.ndarray], x: np.ndarray, actions: np.ndarray,
             old_logp: np.ndarray, adv: np.ndarray, value_targets: np.ndarray,
             clip: float, vf_coef: float, entropy_coef: float, with_grads: bool = True):
    """Clipped surrogate + value + entropy loss on normalized inputs ``x``.

    Returns (loss, grads or None, stats).
    """
    n = len(actions)
    logits, value, acts = forward(weights, x)
    logp_all = log_softmax(logits)
    pi = np.exp(logp_all)
    rows = np.arange(n)
    logp = logp_all[rows, actions]
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    surr = np.minimum(ratio * adv, clipped * adv)
    entropy = -(pi * logp_all).sum(axis=1)
    v_err = value - value_targets

    pg_loss = -surr.mean()
    vf_loss = float(np.mean(v_err**2))
    ent = float(entropy.mean())
    loss = pg_loss + vf_coef * vf_loss - entropy_coef * ent
    stats = {
        "loss": float(loss),
        "policy_loss": float(pg_loss),
        "value_loss": vf_loss,
        "entropy": ent,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip)),
        "approx_kl": float(np.mean((ratio - 1.0) - (logp - old_logp))),
    }
    if not with_grads:
        return loss, None, stats

    # the unclipped branch carries gradient unless clipping is binding
    active = ~(((adv > 0) & (ratio > 1.0 + clip)) | ((adv < 0) & (ratio < 1.0 - clip)))
    d_logp = np.where(active, -ratio * adv, 0.0) / n
    d_logits = -pi * d_logp[:, None]
    d_logits[rows, actions] += d_logp
    # d(-c * H)/dz_j = c * pi_j * (log pi_j + H)
    d_logits += entropy_coef / n * pi * (logp_all + entropy[:, None])
    d_value = vf_coef * 2.0 * v_err / n
    return loss, backward(weights, acts, d_logits, d_value), stats


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def ppo_update(params: PolicyParams, batch: RolloutBatch, hp: HyperParams, opt: Adam,
               rng: np.random.Generator, normalize_values: bool = True,
               check_batch_size: bool = True) -> tuple[PolicyParams, dict[str, float]]:
    """Several epochs of minibatch Adam steps on one batch.

    Observation statistics are frozen for the update; when
    ``normalize_values`` is set, return statistics are refreshed from this
    batch first and the value head regresses normalized returns.
    """
    if check_batch_size and len(batch) != hp.train_batch:
        raise ValueError(f"batch has {len(batch)} samples, expected {hp.train_batch}")
    new = params.copy()
    x_all = new.obs_norm.normalize(batch.obs)
    adv = batch.advantages
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    if normalize_values:
        new.ret_norm.update(batch.returns[:, None])
        targets = (batch.returns - new.ret_norm.mean[0]) / np.sqrt(new.ret_norm.var[0] + NORM_EPS)
    else:
        targets = batch.returns

    n = len(batch)
    mb = min(hp.minibatch, n)
    history: list[dict[str, float]] = []
    grad_norms = []
    for _ in range(hp.epochs_per_iter):
        order = rng.permutation(n)
        for start in range(0, n, mb):
            idx = order[start:start + mb]
            loss, grads, stats = ppo_loss(new.weights, x_all[idx], batch.actions[idx],
                                          batch.logp[idx], adv[idx], targets[idx],
                                          hp.clip, hp.vf_coef, hp.entropy_coef)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise FloatingPointError(f"non-finite PPO loss: {stats}")
            grad_norms.append(clip_grad_norm(grads, hp.max_grad_norm))
            opt.step(new.weights, grads)
            history.append(stats)
    if not new.is_finite():
        raise FloatingPointError("parameters became non-finite")
    summary = {k: float(np.mean([h[k] for h in history])) for k in history[0]}
    summary["grad_norm"] = float(np.mean(grad_norms))
    return new, summary
