"""Episode lifecycle, observation assembly, reward shaping and curriculum."""
from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from .config import Config
from .dynamics import (ActionSpace, CameraIntrinsics, DroneState, action_to_direction,
                       build_action_space, step_kinematic)
from .geometry import TubeSpec, locate, project_points, sample_curriculum_tube
from .sensing import (DirectionalMemory, LidarFeatures, TargetObservation, camera_detect,
                      lidar_features, lidar_rings, update_memory)

OBS_LAYOUT = (
    # lidar
    "h_f", "v_f", "h_r", "v_r", "s_f", "s_r", "m_f", "m_r", "l_min",
    # kinematics
    "fwd_x", "fwd_y", "fwd_z", "up_x", "up_y", "up_z", "right_x", "right_y", "right_z",
    "speed", "dspeed", "global_progress", "offset_right", "offset_up", "offset_forward",
    # camera
    "target_x", "target_y", "target_z", "target_depth", "target_visible",
    # memory
    "invisible_ratio", "memory_x", "memory_y", "memory_z", "memory_valid",
    # context
    "safety", "inside", "episode_progress",
)
OBS_DIM = len(OBS_LAYOUT)
OBS_BLOCKS = {"lidar": (0, 9), "kinematics": (9, 24), "camera": (24, 29),
              "memory": (29, 34), "context": (34, 37)}

R_SUCCESS, R_FAILURE, R_TIMEOUT = 10.0, -10.0, -1.0
# Shaped reward range: w_F*S_F + w_R*S_R <= 1 and the warm-up bonus <= 0.5.
SHAPED_REWARD_BOUNDS = (-1.0, 3.2)

VISIBLE, MEMORY, BLIND = 1, 2, 3


def layout_hash() -> str:
    return hashlib.sha256(",".join(OBS_LAYOUT).encode()).hexdigest()


class Terminal(str, Enum):
    RUNNING = "running"
    SUCCESS = "success"
    FAILURE = "failure"
    TIMEOUT = "timeout"


TERMINAL_REWARD = {Terminal.RUNNING: 0.0, Terminal.SUCCESS: R_SUCCESS,
                   Terminal.FAILURE: R_FAILURE, Terminal.TIMEOUT: R_TIMEOUT}


class EpisodeFinished(RuntimeError):
    """Raised when stepping an environment whose episode has terminated."""


@dataclass
class RewardContext:
    features: LidarFeatures
    target: TargetObservation
    memory: DirectionalMemory
    state: DroneState
    tube: TubeSpec
    t: int = 0
    t_warmup: int = 20
    # Centerline projection of the drone (s, closest point, tangent, d_perp);
    # computed on demand when not supplied.
    projection: tuple[float, np.ndarray, np.ndarray, float] | None = None
    inside: bool = True
    # Normalization constants for the observation builder.
    v_max: float = 1.5
    max_accel_step: float = 0.2
    d_max: float = 5.0
    safety_distance: float = 0.5
    memory_horizon: int = 40
    t_max: int = 1000

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("step index must be non-negative")

    def project(self) -> tuple[float, np.ndarray, np.ndarray, float]:
        if self.projection is None:
            pr = project_points(self.tube.centerline, self.state.position)
            self.projection = (float(pr.s[0]), pr.q[0], pr.t[0], float(pr.d_perp[0]))
        return self.projection


@dataclass(frozen=True)
class StepOutcome:
    observation: np.ndarray
    reward: float
    terminal: Terminal
    info: dict[str, Any] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# reward


def select_regime(ctx: RewardContext) -> int:
    if ctx.target.visible:
        return VISIBLE
    if ctx.memory.valid:
        return MEMORY
    return BLIND


def trajectory_scores(ctx: RewardContext) -> tuple[float, float, float]:
    """(S_center, S_align, S_traj)."""
    _, _, axis, d_perp = ctx.project()
    s_center = float(np.clip(1.0 - d_perp / ctx.tube.radius, 0.0, 1.0))
    f = ctx.state.forward
    regime = select_regime(ctx)
    if regime == VISIBLE:
        s_align = float(f @ ctx.target.direction_world)
    elif regime == MEMORY:
        s_align = float(f @ ctx.memory.last_direction_world)
    else:
        s_align = float(f @ axis)
    return s_center, s_align, 0.5 * s_center + 0.5 * s_align


def turn_weights(c_turn: float) -> tuple[float, float]:
    return 0.6 * (1.0 - 0.4 * c_turn), 0.4 * (1.0 + 0.4 * c_turn)


def warmup_bonus(s_f: float, s_r: float, c_turn: float) -> float:
    return 0.5 * (0.7 * s_f + 0.3 * s_r) * (1.0 - abs(s_f - s_r)) * (1.0 - 0.5 * c_turn)


def shaped_reward(regime: int, s_align: float, feat: LidarFeatures, t: int,
                  t_warmup: int) -> float:
    w_f, w_r = turn_weights(feat.c_turn)
    base = w_f * feat.s_f + w_r * feat.s_r
    if regime == VISIBLE:
        r = s_align + base + 0.4 * feat.m_f + 0.3 * (1.0 - abs(feat.h_f))
    elif regime == MEMORY:
        r = s_align + base + 0.4 * (1.0 - abs(feat.h_f)) + 0.3 * (1.0 - abs(feat.v_f))
    else:
        r = base + 0.4 * feat.m_f - 0.3 * abs(feat.s_f - feat.s_r)
    if t < t_warmup:
        r += warmup_bonus(feat.s_f, feat.s_r, feat.c_turn)
    return float(r)


def compute_reward(ctx: RewardContext) -> float:
    _, s_align, _ = trajectory_scores(ctx)
    return shaped_reward(select_regime(ctx), s_align, ctx.features, ctx.t, ctx.t_warmup)


# ---------------------------------------------------------------------------
# observation


def _unit_to_sym(x: float) -> float:
    return float(np.clip(2.0 * x - 1.0, -1.0, 1.0))


def safety_metric(l_min: float, d_max: float, safety_distance: float) -> float:
    """2*clip(l_min / l_safe, 0, 1) - 1 with ``l_min`` given normalized by d_max."""
    return _unit_to_sym(np.clip(l_min * d_max / safety_distance, 0.0, 1.0))


def build_observation(ctx: RewardContext) -> np.ndarray:
    feat, st, tgt, mem = ctx.features, ctx.state, ctx.target, ctx.memory
    s, q, _, _ = ctx.project()
    obs = np.empty(OBS_DIM)
    obs[0:4] = np.clip([feat.h_f, feat.v_f, feat.h_r, feat.v_r], -1.0, 1.0)
    obs[4:9] = [_unit_to_sym(feat.s_f), _unit_to_sym(feat.s_r), _unit_to_sym(feat.m_f),
                _unit_to_sym(feat.m_r), _unit_to_sym(feat.l_min)]

    obs[9:12] = st.forward
    obs[12:15] = st.up
    obs[15:18] = st.right
    obs[18] = _unit_to_sym(st.speed / ctx.v_max)
    obs[19] = (st.speed - st.prev_speed) / ctx.max_accel_step
    obs[20] = _unit_to_sym(s / ctx.tube.centerline.total_length)
    obs[21:24] = st.basis() @ (st.position - q) / ctx.tube.radius

    if tgt.visible:
        obs[24:27] = tgt.direction_local
        obs[27] = _unit_to_sym(tgt.depth_norm)
        obs[28] = 1.0
    else:
        obs[24:27] = 0.0
        obs[27] = -1.0
        obs[28] = -1.0

    obs[29] = _unit_to_sym(min(mem.steps_since_seen / ctx.memory_horizon, 1.0))
    if mem.valid:
        obs[30:33] = mem.last_direction_local
        obs[33] = 1.0
    else:
        obs[30:33] = 0.0
        obs[33] = -1.0

    obs[34] = safety_metric(feat.l_min, ctx.d_max, ctx.safety_distance)
    obs[35] = 1.0 if ctx.inside else -1.0
    obs[36] = _unit_to_sym(ctx.t / ctx.t_max)
    return np.clip(obs, -1.0, 1.0)


# ---------------------------------------------------------------------------
# curriculum


@dataclass
class CurriculumManager:
    level: int = 0
    window_size: int = 100
    thresholds: tuple[float, ...] = (0.85, 0.80, 0.80)
    window: deque = field(default_factory=deque)
    history: list[int] = field(default_factory=list)
    advance_rates: list[float] = field(default_factory=list)  # window success at each advance

    def __post_init__(self):
        self.window = deque(self.window, maxlen=self.window_size)

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.window)) if self.window else 0.0

    @property
    def max_level(self) -> int:
        return len(self.thresholds) - 1

    def record(self, outcome: Terminal) -> bool:
        """Push one episode outcome; returns True when the level advanced."""
        self.window.append(1 if Terminal(outcome) == Terminal.SUCCESS else 0)
        if (len(self.window) == self.window_size and self.level < self.max_level
                and self.success_rate >= self.thresholds[self.level] - 1e-12):
            self.advance_rates.append(self.success_rate)
            self.level += 1
            self.window.clear()
            self.history.append(self.level)
            return True
        return False


def record_and_maybe_advance(mgr: CurriculumManager, outcome: Terminal) -> CurriculumManager:
    mgr.record(outcome)
    return mgr


# ---------------------------------------------------------------------------
# environment


class TubeNavEnv:
    """Single-threaded tube-navigation MDP over the 36-action discrete set."""

    def __init__(self, config: Config | None = None):
        self.config = cfg = config or Config()
        self.intrinsics = CameraIntrinsics(cfg.sensing.f_w, cfg.sensing.f_h, cfg.sensing.c)
        self.action_space: ActionSpace = build_action_space(self.intrinsics, cfg.dynamics.k,
                                                            cfg.dynamics.v_max)
        self.tube: TubeSpec | None = None
        self.state: DroneState | None = None
        self.memory = DirectionalMemory.empty()
        self.t = 0
        self.terminal = Terminal.RUNNING
        self.last_context: RewardContext | None = None

    @property
    def n_actions(self) -> int:
        return self.action_space.n

    @property
    def done(self) -> bool:
        return self.terminal != Terminal.RUNNING

    def reset(self, level: int = 0, rng: np.random.Generator | int = 0,
              tube: TubeSpec | None = None) -> np.ndarray:
        g = self.config.geometry
        if tube is None:
            tube = sample_curriculum_tube(level, rng, radius=g.radius, length=g.length,
                                          n_samples=g.n_samples)
        self.tube = tube
        cl = tube.centerline
        self.state = DroneState.aligned(cl.positions[0], cl.tangents[0],
                                        speed=float(self.action_space.speeds[0]))
        self.memory = DirectionalMemory.empty()
        self.t = 0
        self.terminal = Terminal.RUNNING
        ctx = self._sense(self.state, step_index=0)
        return build_observation(ctx)

    def step(self, action: int) -> StepOutcome:
        if self.tube is None:
            raise EpisodeFinished("reset() must be called before step()")
        if self.done:
            raise EpisodeFinished(f"episode already ended ({self.terminal.value})")
        pair, speed = self.action_space.decode(action)
        return self.command(action_to_direction(self.state, pair), speed)

    def command(self, direction: np.ndarray, speed: float) -> StepOutcome:
        """Continuous (direction, speed) command through the kinematic model."""
        if self.done:
            raise EpisodeFinished(f"episode already ended ({self.terminal.value})")
        d = self.config.dynamics
        new = step_kinematic(self.state, direction, speed, d.dt, d.max_turn_rate,
                             d.max_accel, d.v_max)
        return self.apply_state(new)

    def apply_state(self, new_state: DroneState) -> StepOutcome:
        """Advance one control step to an externally integrated pose."""
        if self.done:
            raise EpisodeFinished(f"episode already ended ({self.terminal.value})")
        step_index = self.t
        self.t += 1
        self.state = new_state
        ctx = self._sense(new_state, step_index)
        s, _, _, d_perp = ctx.project()
        regime = select_regime(ctx)
        _, s_align, _ = trajectory_scores(ctx)
        shaped = shaped_reward(regime, s_align, ctx.features, step_index, ctx.t_warmup)

        e = self.config.env
        R = self.tube.radius
        if not ctx.inside:
            terminal = Terminal.FAILURE
        elif s >= self.tube.centerline.total_length - e.goal_tolerance_radii * R:
            terminal = Terminal.SUCCESS
        elif self.t >= e.t_max:
            terminal = Terminal.TIMEOUT
        else:
            terminal = Terminal.RUNNING
        self.terminal = terminal
        reward = shaped + TERMINAL_REWARD[terminal]
        info = {
            "t": step_index,
            "position": new_state.position.tolist(),
            "s": s,
            "d_perp_over_r": d_perp / R,
            "s_align": s_align,
            "regime": regime,
            "shaped_reward": shaped,
            "terminal_reward": TERMINAL_REWARD[terminal],
            "c_turn": ctx.features.c_turn,
            "inside": ctx.inside,
        }
        return StepOutcome(build_observation(ctx), float(reward), terminal, info)

    def _sense(self, state: DroneState, step_index: int) -> RewardContext:
        cfg = self.config
        R = self.tube.radius
        s, q, axis, d_perp, inside = locate(self.tube, state.position)
        proj = (s, q, axis, d_perp)
        d_max = cfg.sensing.d_max_radii * R
        front, rear = lidar_rings(self.tube, state, cfg.sensing.n_beams, d_max,
                                  cfg.sensing.ring_offset)
        feats = lidar_features(front, rear)
        if inside:
            target = camera_detect(self.tube, state, self.intrinsics,
                                   cfg.sensing.lookahead_radii * R,
                                   cfg.sensing.depth_range_radii * R, s_drone=proj[0])
        else:
            target = TargetObservation(np.zeros(3), 0.0, False, np.zeros(3), 0.0)
        self.memory = update_memory(self.memory, target, cfg.sensing.memory_horizon, state)
        ctx = RewardContext(
            feats, target, self.memory, state, self.tube, t=step_index,
            t_warmup=cfg.env.t_warmup, projection=proj, inside=inside,
            v_max=cfg.dynamics.v_max, max_accel_step=cfg.dynamics.max_accel * cfg.dynamics.dt,
            d_max=d_max, safety_distance=cfg.env.safety_radii * R,
            memory_horizon=cfg.sensing.memory_horizon, t_max=cfg.env.t_max,
        )
        self.last_context = ctx
        return ctx


def append_jsonl(path, records) -> None:
    with open(path, "a") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
