"""Episode runner, quality metrics, paired PPO-vs-PP comparison and plot data."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from .config import Config
from .env import Terminal, TubeNavEnv
from .geometry import TubeSpec, sample_curriculum_tube
from .purepursuit import PurePursuitConfig, PurePursuitController

TUNING_SEED_OFFSET = 1_000_000


class UndefinedMetric(ValueError):
    """A metric was requested over an empty set of steps."""


@dataclass(frozen=True)
class StepLog:
    t: int
    position: tuple[float, float, float]
    d_perp_over_r: float
    s_align: float
    regime: int
    reward: float
    c_turn: float
    inside: bool = True

    @classmethod
    def from_info(cls, info: dict, reward: float) -> "StepLog":
        return cls(int(info["t"]), tuple(info["position"]), float(info["d_perp_over_r"]),
                   float(info["s_align"]), int(info["regime"]), float(reward),
                   float(info["c_turn"]), bool(info["inside"]))


@dataclass
class EpisodeRecord:
    steps: list[StepLog]
    terminal: Terminal
    tube_seed: int
    level: int
    controller: str

    @property
    def ret(self) -> float:
        return float(sum(s.reward for s in self.steps))

    def to_jsonl(self) -> str:
        lines = []
        for s in self.steps:
            rec = asdict(s)
            rec["terminal"] = Terminal.RUNNING.value
            lines.append(rec)
        if lines:
            lines[-1]["terminal"] = Terminal(self.terminal).value
        return "".join(json.dumps(r) + "\n" for r in lines)


class Controller(Protocol):
    name: str

    def act(self, env: TubeNavEnv, obs: np.ndarray): ...


class PolicyController:
    """Greedy (argmax) policy with frozen normalization statistics."""

    def __init__(self, params, name: str = "ppo"):
        from .ppo.network import greedy_action
        self.params = params
        self.name = name
        self._greedy = greedy_action

    def act(self, env: TubeNavEnv, obs: np.ndarray) -> int:
        return self._greedy(self.params, obs)


def run_episode(controller: Controller, tube: TubeSpec, seed: int = 0,
                config: Config | None = None) -> EpisodeRecord:
    env = TubeNavEnv(config)
    obs = env.reset(tube=tube)
    steps: list[StepLog] = []
    while True:
        action = controller.act(env, obs)
        out = env.step(action) if np.isscalar(action) else env.command(*action)
        steps.append(StepLog.from_info(out.info, out.reward))
        obs = out.observation
        if out.terminal != Terminal.RUNNING:
            return EpisodeRecord(steps, out.terminal, seed, tube.level,
                                 getattr(controller, "name", "controller"))


def quality_index(rec: EpisodeRecord) -> float:
    """Equal-weight mean of centering (1 - d/R) and alignment mapped to [0, 1]."""
    inside = [s for s in rec.steps if s.inside]
    if not inside:
        raise UndefinedMetric("quality index needs at least one in-tube step")
    centering = np.mean([1.0 - s.d_perp_over_r for s in inside])
    alignment = np.mean([(s.s_align + 1.0) / 2.0 for s in inside])
    return float(0.5 * centering + 0.5 * alignment)


# ---------------------------------------------------------------------------
# comparison


@dataclass
class ComparisonRow:
    controller: str
    level: int
    episodes: int
    success_pct: float
    exit_pct: float
    timeout_pct: float
    quality: float
    seeds: list[int] = field(default_factory=list)
    terminals: list[str] = field(default_factory=list)  # per seed, same order


@dataclass
class ComparisonTable:
    rows: list[ComparisonRow]
    meta: dict = field(default_factory=dict)

    def row(self, controller: str, level: int) -> ComparisonRow:
        for r in self.rows:
            if r.controller == controller and r.level == level:
                return r
        raise KeyError((controller, level))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["controller", "level", "episodes", "success_pct", "exit_pct", "timeout_pct",
                    "quality", "seeds"])
        for r in self.rows:
            w.writerow([r.controller, r.level, r.episodes, f"{r.success_pct:.2f}",
                        f"{r.exit_pct:.2f}", f"{r.timeout_pct:.2f}", f"{r.quality:.4f}",
                        " ".join(map(str, r.seeds))])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": [asdict(r) for r in self.rows], "meta": self.meta}, indent=2)

    def summary(self) -> str:
        lines = [f"{'controller':<12}{'level':>6}{'success%':>10}{'exit%':>8}{'timeout%':>10}{'Q':>8}"]
        for r in self.rows:
            lines.append(f"{r.controller:<12}{r.level:>6}{r.success_pct:>10.1f}{r.exit_pct:>8.1f}"
                         f"{r.timeout_pct:>10.1f}{r.quality:>8.3f}")
        return "\n".join(lines)


def aggregate(records: list[EpisodeRecord], controller: str, level: int) -> ComparisonRow:
    n = len(records)
    if n == 0:
        raise UndefinedMetric("no episodes to aggregate")
    records = sorted(records, key=lambda r: r.tube_seed)
    count = {t: sum(1 for r in records if r.terminal == t) for t in Terminal}
    qs = []
    for r in records:
        try:
            qs.append(quality_index(r))
        except UndefinedMetric:
            pass
    return ComparisonRow(controller, level, n, 100.0 * count[Terminal.SUCCESS] / n,
                         100.0 * count[Terminal.FAILURE] / n, 100.0 * count[Terminal.TIMEOUT] / n,
                         float(np.mean(qs)) if qs else float("nan"),
                         [r.tube_seed for r in records], [r.terminal.value for r in records])


def episode_seeds(base_seed: int, n_episodes: int) -> list[int]:
    return [base_seed + i for i in range(n_episodes)]


def evaluate(controller: Controller, level: int, seeds: Iterable[int],
             config: Config | None = None) -> list[EpisodeRecord]:
    config = config or Config()
    g = config.geometry
    records = []
    for seed in seeds:
        tube = sample_curriculum_tube(level, seed, radius=g.radius, length=g.length,
                                      n_samples=g.n_samples)
        records.append(run_episode(controller, tube, seed, config))
    return records


def pp_controller(config: Config, lookahead_radii: float | None = None,
                  name: str = "pp") -> PurePursuitController:
    s = config.pure_pursuit
    L = (lookahead_radii if lookahead_radii is not None else s.lookahead_radii) * config.geometry.radius
    ctrl = PurePursuitController(PurePursuitConfig(L, s.speed_policy, s.v_cmd, s.kappa_ref),
                                 continuous=s.continuous)
    ctrl.name = name
    return ctrl


def sweep_pp_lookahead(config: Config, levels: Iterable[int], n_tuning: int,
                       base_seed: int) -> tuple[float, list[dict]]:
    """Pick the lookahead (in radii) with the best total success on tuning
    tubes disjoint from the evaluation seeds; ties prefer fewer exits, then
    higher quality, then the shorter lookahead."""
    levels = list(levels)
    seeds = episode_seeds(base_seed + TUNING_SEED_OFFSET, n_tuning)
    results = []
    for radii in config.pure_pursuit.sweep_radii:
        ctrl = pp_controller(config, radii)
        rows = [aggregate(evaluate(ctrl, lvl, seeds, config), "pp", lvl) for lvl in levels]
        results.append({
            "lookahead_radii": radii,
            "success_pct": float(np.mean([r.success_pct for r in rows])),
            "exit_pct": float(np.mean([r.exit_pct for r in rows])),
            "quality": float(np.nanmean([r.quality for r in rows])),
        })
    best = max(results, key=lambda r: (r["success_pct"], -r["exit_pct"], r["quality"],
                                       -r["lookahead_radii"]))
    return float(best["lookahead_radii"]), results


def select_checkpoint(paths: Iterable[str | Path], config: Config, levels: Iterable[int],
                      n_tuning: int, base_seed: int) -> tuple[Path, list[dict]]:
    """Pick the policy checkpoint that flies best (greedy) on the same
    held-out tuning tubes the lookahead sweep uses; the ranking mirrors
    :func:`sweep_pp_lookahead` and ties keep the earlier candidate."""
    from .ppo.checkpoint import load_checkpoint

    paths = [Path(p) for p in paths]
    if not paths:
        raise ValueError("no candidate checkpoints")
    levels = list(levels)
    seeds = episode_seeds(base_seed + TUNING_SEED_OFFSET, n_tuning)
    results = []
    for path in paths:
        ctrl = PolicyController(load_checkpoint(path)[0])
        rows = [aggregate(evaluate(ctrl, lvl, seeds, config), "ppo", lvl) for lvl in levels]
        results.append({
            "checkpoint": str(path),
            "success_pct": float(np.mean([r.success_pct for r in rows])),
            "exit_pct": float(np.mean([r.exit_pct for r in rows])),
            "quality": float(np.nanmean([r.quality for r in rows])),
        })
    best = max(enumerate(results), key=lambda ir: (ir[1]["success_pct"], -ir[1]["exit_pct"],
                                                   ir[1]["quality"], -ir[0]))[1]
    return Path(best["checkpoint"]), results


def compare(controllers: dict[str, Controller], levels: Iterable[int], n_episodes: int,
            base_seed: int, config: Config | None = None,
            log_dir: str | Path | None = None) -> ComparisonTable:
    """Every controller flies the same tubes (paired seeds) at every level."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    config = config or Config()
    seeds = episode_seeds(base_seed, n_episodes)
    rows = []
    for level in levels:
        for name, ctrl in controllers.items():
            records = evaluate(ctrl, level, seeds, config)
            rows.append(aggregate(records, name, level))
            if log_dir is not None:
                d = Path(log_dir)
                d.mkdir(parents=True, exist_ok=True)
                with open(d / f"{name}_level{level}.jsonl", "w") as fh:
                    for r in records:
                        fh.write(r.to_jsonl())
    return ComparisonTable(rows, {"base_seed": base_seed, "n_episodes": n_episodes})


# ---------------------------------------------------------------------------
# plot data


def emit_plots(metrics: list[dict] | str | Path, out_dir: str | Path) -> dict[str, Path]:
    """Columnar CSV series for training curves and curriculum transitions."""
    if isinstance(metrics, (str, Path)):
        with open(metrics) as fh:
            metrics = [json.loads(line) for line in fh if line.strip()]
    if not metrics:
        raise ValueError("no metrics records to plot")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.csv" for name in ("success", "return", "transitions")}
    with open(paths["success"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "success_rate", "curriculum_success_rate", "level"])
        for m in metrics:
            w.writerow([m["iteration"], m["success_rate"], m.get("curriculum_success_rate", ""),
                        m["level"]])
    with open(paths["return"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "mean_return", "level"])
        for m in metrics:
            ret = m.get("mean_return")
            w.writerow([m["iteration"], "" if ret is None else ret, m["level"]])
    with open(paths["transitions"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "from_level", "to_level"])
        for m in metrics:
            if m.get("advanced_to") is not None:
                w.writerow([m["iteration"], m["level"], m["advanced_to"]])
    return paths
