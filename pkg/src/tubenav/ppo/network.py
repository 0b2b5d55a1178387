"""Actor-critic MLP in plain numpy: tanh trunk, linear logit and value heads."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NORM_EPS = 1e-8
NORM_CLIP = 5.0


@dataclass
class RunningNorm:
    """Running mean / variance merged batch-wise (Chan et al. parallel update)."""

    mean: np.ndarray
    var: np.ndarray
    count: float = 0.0

    @classmethod
    def zeros(cls, dim: int) -> "RunningNorm":
        return cls(np.zeros(dim), np.ones(dim), 0.0)

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=float).reshape(-1, len(self.mean))
        n = len(x)
        if n == 0:
            return
        b_mean = x.mean(axis=0)
        b_var = x.var(axis=0)
        total = self.count + n
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * n + delta**2 * self.count * n / total
        self.mean = self.mean + delta * n / total
        self.var = m2 / total
        self.count = total

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return np.clip((x - self.mean) / np.sqrt(self.var + NORM_EPS), -NORM_CLIP, NORM_CLIP)

    def copy(self) -> "RunningNorm":
        return RunningNorm(self.mean.copy(), self.var.copy(), self.count)


def orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    a = rng.standard_normal(shape if shape[0] >= shape[1] else shape[::-1])
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return gain * q[: shape[0], : shape[1]]


@dataclass
class PolicyParams:
    """Weights keyed W0,b0,... for the trunk, Wpi,bpi for logits, Wv,bv for value.

    Weight matrices map rows of inputs: ``h = x @ W + b``.
    """

    weights: dict[str, np.ndarray]
    obs_norm: RunningNorm
    ret_norm: RunningNorm = field(default_factory=lambda: RunningNorm.zeros(1))

    @property
    def n_hidden(self) -> int:
        return sum(1 for k in self.weights if k.startswith("W") and k[1:].isdigit())

    @property
    def dims(self) -> tuple[int, ...]:
        sizes = [self.weights["W0"].shape[0]]
        sizes += [self.weights[f"W{i}"].shape[1] for i in range(self.n_hidden)]
        return tuple(sizes) + (self.weights["Wpi"].shape[1],)

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.weights.items()},
                            self.obs_norm.copy(), self.ret_norm.copy())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.weights.values())


def init_params(rng: np.random.Generator, obs_dim: int = 37, hidden: tuple[int, ...] = (256, 128),
                n_actions: int = 36, pi_gain: float = 0.01, v_gain: float = 1.0) -> PolicyParams:
    w: dict[str, np.ndarray] = {}
    fan_in = obs_dim
    for i, h in enumerate(hidden):
        w[f"W{i}"] = orthogonal(rng, (fan_in, h), np.sqrt(2.0))
        w[f"b{i}"] = np.zeros(h)
        fan_in = h
    w["Wpi"] = orthogonal(rng, (fan_in, n_actions), pi_gain)
    w["bpi"] = np.zeros(n_actions)
    w["Wv"] = orthogonal(rng, (fan_in, 1), v_gain)
    w["bv"] = np.zeros(1)
    return PolicyParams(w, RunningNorm.zeros(obs_dim))


def forward(weights: dict[str, np.ndarray], x: np.ndarray):
    """Forward pass on already-normalized inputs; returns (logits, value, cache)."""
    acts = [x]
    h = x
    i = 0
    while f"W{i}" in weights:
        h = np.tanh(h @ weights[f"W{i}"] + weights[f"b{i}"])
        acts.append(h)
        i += 1
    logits = h @ weights["Wpi"] + weights["bpi"]
    value = (h @ weights["Wv"] + weights["bv"])[:, 0]
    return logits, value, acts


def backward(weights: dict[str, np.ndarray], acts: list[np.ndarray], d_logits: np.ndarray,
             d_value: np.ndarray) -> dict[str, np.ndarray]:
    h = acts[-1]
    grads = {
        "Wpi": h.T @ d_logits,
        "bpi": d_logits.sum(axis=0),
        "Wv": h.T @ d_value[:, None],
        "bv": np.array([d_value.sum()]),
    }
    dh = d_logits @ weights["Wpi"].T + d_value[:, None] @ weights["Wv"].T
    for i in range(len(acts) - 2, -1, -1):
        dz = dh * (1.0 - acts[i + 1] ** 2)
        grads[f"W{i}"] = acts[i].T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        if i > 0:
            dh = dz @ weights[f"W{i}"].T
    return grads


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def policy_forward(params: PolicyParams, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(logits, value) for raw observations, with frozen normalization stats.

    The value is returned in return units (the value head is trained on
    normalized returns).
    """
    obs = np.asarray(obs, dtype=float)
    if not np.all(np.isfinite(obs)):
        raise ValueError("non-finite observation")
    single = obs.ndim == 1
    x = params.obs_norm.normalize(np.atleast_2d(obs))
    logits, v, _ = forward(params.weights, x)
    value = v * np.sqrt(params.ret_norm.var[0] + NORM_EPS) + params.ret_norm.mean[0]
    if single:
        return logits[0], value[0]
    return logits, value


def greedy_action(params: PolicyParams, obs: np.ndarray) -> int:
    logits, _ = policy_forward(params, obs)
    return int(np.argmax(logits))


class Adam:
    def __init__(self, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, weights: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr = np.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            weights[k] -= self.lr * corr * self.m[k] / (np.sqrt(self.v[k]) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam_m/{k}": v for k, v in self.m.items()}
        out.update({f"adam_v/{k}": v for k, v in self.v.items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for key, val in arrays.items():
            kind, name = key.split("/", 1)
            (self.m if kind == "adam_m" else self.v)[name] = np.array(val)
