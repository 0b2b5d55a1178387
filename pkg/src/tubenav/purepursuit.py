"""Pure Pursuit baseline with privileged centerline access."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import ActionSpace, DroneState, action_to_direction
from .geometry import Centerline, locate, TubeSpec

FIXED, CURVATURE_SCALED = "fixed", "curvature_scaled"


@dataclass(frozen=True)
class PurePursuitConfig:
    lookahead: float = 4.0
    speed_policy: str = FIXED
    v_cmd: float = 1.5
    kappa_ref: float = 0.35

    def __post_init__(self):
        if self.lookahead <= 0:
            raise ValueError("lookahead must be positive")
        if self.speed_policy not in (FIXED, CURVATURE_SCALED):
            raise ValueError(f"unknown speed policy {self.speed_policy!r}")


def lookahead_point(cl: Centerline, s: float, L: float) -> np.ndarray:
    return cl.point_at(min(s + L, cl.total_length))


def local_curvature(cl: Centerline, s: float) -> float:
    """Curvature from centerline finite differences around arc length ``s``."""
    i = int(np.clip(np.searchsorted(cl.arclength, s), 1, cl.n_samples - 2))
    a, b, c = cl.positions[i - 1], cl.positions[i], cl.positions[i + 1]
    ab, bc, ca = np.linalg.norm(b - a), np.linalg.norm(c - b), np.linalg.norm(a - c)
    area2 = np.linalg.norm(np.cross(b - a, c - a))
    return float(2.0 * area2 / (ab * bc * ca)) if ab * bc * ca > 0 else 0.0


def pp_control(tube: TubeSpec, state: DroneState, cfg: PurePursuitConfig) -> tuple[np.ndarray, float]:
    """Continuous (unit direction, speed) command towards the lookahead point."""
    cl = tube.centerline
    s = locate(tube, state.position)[0]
    v = lookahead_point(cl, s, cfg.lookahead) - state.position
    n = np.linalg.norm(v)
    direction = v / n if n > 1e-12 else state.forward.copy()
    speed = cfg.v_cmd
    if cfg.speed_policy == CURVATURE_SCALED:
        speed = cfg.v_cmd * float(np.clip(1.0 - local_curvature(cl, s) / cfg.kappa_ref, 0.25, 1.0))
    return direction, speed


def snap_to_action(space: ActionSpace, state: DroneState, direction: np.ndarray,
                   speed: float) -> int:
    """Nearest discrete action: largest dot product over the steering
    directions and nearest speed level; ties resolve to the lower index."""
    dots = np.array([action_to_direction(state, tuple(p)) @ direction for p in space.directions])
    d_idx = int(np.flatnonzero(dots >= dots.max() - 1e-12)[0])
    gaps = np.abs(space.speeds - speed)
    s_idx = int(np.flatnonzero(gaps <= gaps.min() + 1e-12)[0])
    return space.encode(d_idx, s_idx)


class PurePursuitController:
    """Stateless controller exposing the same interface as a trained policy."""

    name = "pp"

    def __init__(self, cfg: PurePursuitConfig = PurePursuitConfig(), continuous: bool = False):
        self.cfg = cfg
        self.continuous = continuous

    def act(self, env, obs: np.ndarray | None = None):
        direction, speed = pp_control(env.tube, env.state, self.cfg)
        if self.continuous:
            return direction, speed
        return snap_to_action(env.action_space, env.state, direction, speed)
