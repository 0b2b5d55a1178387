"""Rollout workers: each owns one environment and a private RNG."""
from __future__ import annotations

import multiprocessing as mp
from dataclasses import dataclass, field

import numpy as np

from ..config import Config
from ..env import Terminal, TubeNavEnv
from .algo import RolloutBatch, compute_gae
from .network import PolicyParams, log_softmax, policy_forward


@dataclass(frozen=True)
class EpisodeSummary:
    worker: int
    terminal: Terminal
    ret: float
    length: int
    level: int


@dataclass
class WorkerResult:
    batch: RolloutBatch
    episodes: list[EpisodeSummary] = field(default_factory=list)


def sample_action(logits: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
    logp = log_softmax(logits)
    cdf = np.cumsum(np.exp(logp))
    a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    a = min(a, len(logits) - 1)
    return a, float(logp[a])


class RolloutWorker:
    def __init__(self, config: Config, worker_id: int, seed: int):
        self.worker_id = worker_id
        self.env = TubeNavEnv(config)
        self.rng = np.random.default_rng([seed, worker_id])
        self.obs: np.ndarray | None = None
        self.ep_return = 0.0
        self.ep_len = 0
        self.ep_level = 0

    def collect(self, params: PolicyParams, n_steps: int, level: int, rollout_len: int,
                gamma: float, lambda_gae: float) -> WorkerResult:
        """``n_steps`` transitions, split into fragments of ``rollout_len`` for GAE.

        An unfinished episode carries over to the next call; new episodes use
        the current curriculum ``level``.
        """
        n_act = self.env.n_actions
        obs_buf = np.empty((n_steps, len(params.obs_norm.mean)))
        act = np.empty(n_steps, dtype=np.int64)
        logp = np.empty(n_steps)
        rew = np.empty(n_steps)
        val = np.empty(n_steps)
        done = np.empty(n_steps)
        episodes: list[EpisodeSummary] = []
        for t in range(n_steps):
            if self.obs is None:
                self.obs = self.env.reset(level, self.rng)
                self.ep_return, self.ep_len, self.ep_level = 0.0, 0, level
            logits, value = policy_forward(params, self.obs)
            a, lp = sample_action(logits, self.rng)
            assert 0 <= a < n_act
            out = self.env.step(a)
            obs_buf[t], act[t], logp[t], rew[t], val[t] = self.obs, a, lp, out.reward, value
            self.ep_return += out.reward
            self.ep_len += 1
            if out.terminal != Terminal.RUNNING:
                done[t] = 1.0
                episodes.append(EpisodeSummary(self.worker_id, out.terminal, self.ep_return,
                                               self.ep_len, self.ep_level))
                self.obs = None
            else:
                done[t] = 0.0
                self.obs = out.observation

        adv = np.empty(n_steps)
        ret = np.empty(n_steps)
        for lo in range(0, n_steps, rollout_len):
            hi = min(lo + rollout_len, n_steps)
            if hi < n_steps:
                boot = val[hi]
            elif self.obs is not None:
                boot = float(policy_forward(params, self.obs)[1])
            else:
                boot = 0.0
            adv[lo:hi], ret[lo:hi] = compute_gae(rew[lo:hi], val[lo:hi], done[lo:hi], gamma,
                                                 lambda_gae, boot)
        batch = RolloutBatch(obs_buf, act, logp, rew, val, done, adv, ret)
        return WorkerResult(batch, episodes)

    def rng_state(self) -> dict:
        return self.rng.bit_generator.state


class SerialSampler:
    def __init__(self, config: Config, n_workers: int, seed: int):
        self.workers = [RolloutWorker(config, i, seed) for i in range(n_workers)]

    def collect(self, params, n_steps, level, rollout_len, gamma, lambda_gae) -> list[WorkerResult]:
        return [w.collect(params, n_steps, level, rollout_len, gamma, lambda_gae)
                for w in self.workers]

    def rng_states(self) -> list[dict]:
        return [w.rng_state() for w in self.workers]

    def close(self) -> None:
        pass


def _worker_main(conn, config, worker_id, seed):
    worker = RolloutWorker(config, worker_id, seed)
    while True:
        msg = conn.recv()
        if msg[0] == "collect":
            conn.send(worker.collect(*msg[1:]))
        elif msg[0] == "rng":
            conn.send(worker.rng_state())
        else:
            break
    conn.close()


class ParallelSampler:
    """One process per worker; results are gathered in worker order, so the
    merged batch is identical to the serial sampler's."""

    def __init__(self, config: Config, n_workers: int, seed: int):
        methods = mp.get_all_start_methods()
        ctx = mp.get_context("fork" if "fork" in methods else "spawn")
        self.conns = []
        self.procs = []
        for i in range(n_workers):
            parent, child = ctx.Pipe()
            p = ctx.Process(target=_worker_main, args=(child, config, i, seed), daemon=True)
            p.start()
            child.close()
            self.conns.append(parent)
            self.procs.append(p)

    def collect(self, params, n_steps, level, rollout_len, gamma, lambda_gae) -> list[WorkerResult]:
        for c in self.conns:
            c.send(("collect", params, n_steps, level, rollout_len, gamma, lambda_gae))
        return [c.recv() for c in self.conns]

    def rng_states(self) -> list[dict]:
        for c in self.conns:
            c.send(("rng",))
        return [c.recv() for c in self.conns]

    def close(self) -> None:
        for c in self.conns:
            try:
                c.send(("close",))
                c.close()
            except (BrokenPipeError, OSError):
                pass
        for p in self.procs:
            p.join(timeout=5)
            if p.is_alive():
                p.terminate()
