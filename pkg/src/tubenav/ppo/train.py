"""Training driver: sampling, PPO updates, curriculum gating, metrics and checkpoints."""
from __future__ import annotations

import dataclasses
import json
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ..config import Config
from ..env import OBS_DIM, CurriculumManager, Terminal
from .algo import HyperParams, RolloutBatch, ppo_update
from .checkpoint import save_checkpoint
from .network import Adam, PolicyParams, init_params
from .rollout import ParallelSampler, SerialSampler

SUCCESS_WINDOW = 100


@dataclass
class TrainResult:
    params: PolicyParams
    iterations: int
    level: int
    metrics_path: Path
    checkpoint_path: Path
    elapsed_s: float
    stop_reason: str
    best_path: Path | None = None


def _jsonable(rng_states):
    return json.loads(json.dumps(rng_states))


def train(cfg: Config, out_dir: str | Path, log: Callable[[str], None] | None = print) -> TrainResult:
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))

    pc = cfg.ppo
    hp = HyperParams.from_section(pc)
    if hp.train_batch % hp.n_workers:
        raise ValueError("n_workers must divide train_batch")
    steps_per_worker = hp.train_batch // hp.n_workers

    rng = np.random.default_rng(pc.seed)
    env_actions = 36
    params = init_params(rng, OBS_DIM, (256, 128), env_actions)
    opt = Adam(hp.lr)
    mgr = CurriculumManager(window_size=cfg.env.curriculum_window,
                            thresholds=tuple(cfg.env.thresholds))
    recent = deque(maxlen=SUCCESS_WINDOW)
    sampler_cls = ParallelSampler if pc.parallel and hp.n_workers > 1 else SerialSampler
    sampler = sampler_cls(cfg, hp.n_workers, pc.seed)

    t0 = time.perf_counter()
    timesteps = 0
    episodes_total = 0
    last_good = out / "checkpoints" / "latest.npz"
    best_path = out / "checkpoints" / "best.npz"
    best_key = None  # (level, windowed success) of the saved best policy
    stop_reason = "iterations"
    it = 0

    def checkpoint(iteration: int) -> Path:
        meta = {
            "iteration": iteration,
            "level": mgr.level,
            "timesteps": timesteps,
            "hyperparams": dataclasses.asdict(hp),
            "config": cfg.to_dict(),
            "rng": {"learner": rng.bit_generator.state, "workers": _jsonable(sampler.rng_states())},
        }
        save_checkpoint(out / "checkpoints" / f"iter_{iteration:05d}.npz", params, meta, opt)
        return save_checkpoint(last_good, params, meta, opt)

    try:
        for it in range(1, pc.iterations + 1):
            level = mgr.level
            results = sampler.collect(params, steps_per_worker, level, hp.rollout_len,
                                      hp.gamma, hp.lambda_gae)
            batch = RolloutBatch.concat([r.batch for r in results])
            timesteps += len(batch)
            eps = [e for r in results for e in r.episodes]
            advanced_to = None
            for e in eps:
                success = e.terminal == Terminal.SUCCESS
                # outcomes from episodes started before a level change do not count
                if e.level == mgr.level:
                    if mgr.record(e.terminal):
                        advanced_to = mgr.level
                recent.append(1.0 if success else 0.0)
            episodes_total += len(eps)

            params, stats = ppo_update(params, batch, hp, opt, rng)
            params.obs_norm.update(batch.obs)

            counts = {k.value: 0 for k in Terminal if k != Terminal.RUNNING}
            for e in eps:
                counts[e.terminal.value] += 1
            rec = {
                "iteration": it,
                "level": level,
                "level_after": mgr.level,
                "advanced_to": advanced_to,
                "advance_success_rate": mgr.advance_rates[-1] if advanced_to is not None else None,
                "success_rate": float(np.mean(recent)) if recent else 0.0,
                "curriculum_success_rate": mgr.success_rate,
                "curriculum_window": len(mgr.window),
                "iter_success_rate": counts["success"] / len(eps) if eps else None,
                "mean_return": float(np.mean([e.ret for e in eps])) if eps else None,
                "mean_length": float(np.mean([e.length for e in eps])) if eps else None,
                "episodes": len(eps),
                "outcomes": counts,
                "timesteps": timesteps,
                "elapsed_s": time.perf_counter() - t0,
                **stats,
            }
            if log:
                log(f"it {it:4d} L{level} succ {rec['success_rate']:.2f} "
                    f"cur {mgr.success_rate:.2f}/{len(mgr.window)} ret {rec['mean_return'] or 0:.1f} "
                    f"ent {stats['entropy']:.2f} kl {stats['approx_kl']:.4f} "
                    f"t {rec['elapsed_s']:.0f}s")
            if it % pc.checkpoint_every == 0:
                checkpoint(it)
            # late training can drift toward slow, timeout-prone behaviour, so keep
            # the policy with the best full-window success at the highest level
            if len(mgr.window) == mgr.window_size and advanced_to is None:
                key = (mgr.level, mgr.success_rate)
                if best_key is None or key > best_key:
                    best_key = key
                    save_checkpoint(best_path, params, {"iteration": it, "level": mgr.level,
                                                        "windowed_success": mgr.success_rate,
                                                        "timesteps": timesteps})
                    rec["best"] = True
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
            if pc.stop_at_level >= 0 and mgr.level >= pc.stop_at_level:
                stop_reason = f"reached level {mgr.level}"
                break
            if time.perf_counter() - t0 >= pc.time_budget_s:
                stop_reason = "time budget"
                break
        path = checkpoint(it)
    finally:
        sampler.close()
    return TrainResult(params, it, mgr.level, metrics_path, path,
                       time.perf_counter() - t0, stop_reason,
                       best_path if best_key is not None else None)


def read_metrics(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
