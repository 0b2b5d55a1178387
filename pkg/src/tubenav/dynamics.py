"""Drone kinematic state, the camera-cone action space and a rigid-body
integrator for the physics bridge."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

WORLD_UP = np.array([0.0, 1.0, 0.0])
GRAVITY = np.array([0.0, -9.81, 0.0])


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class DroneState:
    """Body frame convention: local (x, y, z) = (right, up, forward)."""

    position: np.ndarray
    forward: np.ndarray
    up: np.ndarray
    right: np.ndarray
    speed: float = 0.0
    prev_speed: float = 0.0

    @classmethod
    def aligned(cls, position, forward, speed: float = 0.0, up_hint=WORLD_UP) -> "DroneState":
        f = _unit(np.asarray(forward, dtype=float))
        up, right = _level_frame(f, np.asarray(up_hint, dtype=float))
        return cls(np.asarray(position, dtype=float).copy(), f, up, right, speed, speed)

    def basis(self) -> np.ndarray:
        """Rows right, up, forward: maps world vectors to body coordinates."""
        return np.vstack([self.right, self.up, self.forward])

    def orthonormality_error(self) -> float:
        B = self.basis()
        return float(np.max(np.abs(B @ B.T - np.eye(3))))


def _level_frame(forward: np.ndarray, fallback_up: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Up/right with minimal roll: world up projected off the forward axis."""
    up = WORLD_UP - (WORLD_UP @ forward) * forward
    n = np.linalg.norm(up)
    if n < 1e-6:
        up = fallback_up - (fallback_up @ forward) * forward
        n = np.linalg.norm(up)
    if n < 1e-6:  # vertical forward and no usable hint
        ref = np.eye(3)[int(np.argmin(np.abs(forward)))]
        up = ref - (ref @ forward) * forward
        n = np.linalg.norm(up)
    up = up / n
    right = np.cross(up, forward)
    right /= np.linalg.norm(right)
    # one more pass keeps the triad orthogonal to rounding precision
    up = np.cross(forward, right)
    return up, right


@dataclass(frozen=True)
class CameraIntrinsics:
    f_w: float = 1.0
    f_h: float = 0.7
    c: float = 1.0

    def __post_init__(self):
        if min(self.f_w, self.f_h, self.c) <= 0:
            raise ValueError("camera intrinsics must be positive")

    @property
    def half_fov(self) -> tuple[float, float]:
        return float(np.arctan(self.f_w / self.c)), float(np.arctan(self.f_h / self.c))


@dataclass(frozen=True)
class ActionSpace:
    """Nine (alpha, beta) steering pairs times four speed levels.

    Action index ``i`` maps to direction ``i // 4`` and speed ``i % 4``;
    index 0 is straight ahead at the lowest speed.
    """

    directions: np.ndarray
    speeds: np.ndarray

    @property
    def n(self) -> int:
        return len(self.directions) * len(self.speeds)

    def decode(self, index: int) -> tuple[tuple[float, float], float]:
        if not 0 <= index < self.n:
            raise ValueError(f"action index {index} outside [0, {self.n})")
        d, s = divmod(int(index), len(self.speeds))
        a, b = self.directions[d]
        return (float(a), float(b)), float(self.speeds[s])

    def encode(self, direction_index: int, speed_index: int) -> int:
        return direction_index * len(self.speeds) + speed_index


def build_action_space(intrinsics: CameraIntrinsics = CameraIntrinsics(), k: float = 0.75,
                       v_max: float = 1.5) -> ActionSpace:
    if not 0.0 < k < 1.0:
        raise ValueError("cone scale k must lie in (0, 1)")
    ta, tb = intrinsics.half_fov
    a, b = k * ta, k * tb
    directions = np.array([
        (0.0, 0.0),
        (a, 0.0), (-a, 0.0),
        (0.0, b), (0.0, -b),
        (a, b), (a, -b), (-a, b), (-a, -b),
    ])
    speeds = np.array([0.25, 0.5, 0.75, 1.0]) * v_max
    return ActionSpace(directions, speeds)


def action_to_direction(state: DroneState, pair: tuple[float, float]) -> np.ndarray:
    alpha, beta = pair
    if abs(alpha) >= np.pi / 2 or abs(beta) >= np.pi / 2:
        raise ValueError("steering angles must stay inside (-pi/2, pi/2)")
    d = _unit(state.forward + np.tan(alpha) * state.right + np.tan(beta) * state.up)
    assert d @ state.forward > 0.0, "backward-facing command"
    return d


def rotate_towards(v: np.ndarray, target: np.ndarray, max_angle: float) -> np.ndarray:
    """Rotate unit ``v`` towards unit ``target`` by at most ``max_angle``."""
    cos = float(np.clip(v @ target, -1.0, 1.0))
    angle = np.arccos(cos)
    if angle <= max_angle:
        return _unit(np.asarray(target, dtype=float))
    w = target - cos * v
    n = np.linalg.norm(w)
    if n < 1e-12:
        w = np.cross(v, WORLD_UP)
        if np.linalg.norm(w) < 1e-12:
            w = np.cross(v, np.array([1.0, 0.0, 0.0]))
        n = np.linalg.norm(w)
    w = w / n
    return _unit(np.cos(max_angle) * v + np.sin(max_angle) * w)


def step_kinematic(state: DroneState, commanded_dir: np.ndarray, commanded_speed: float,
                   dt: float = 0.1, max_turn_rate: float = 2.0, max_accel: float = 2.0,
                   v_max: float = 1.5) -> DroneState:
    """Bounded-slew kinematic update; ``max_turn_rate=inf`` turns instantly."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    f = rotate_towards(state.forward, _unit(np.asarray(commanded_dir, dtype=float)),
                       max_turn_rate * dt)
    up, right = _level_frame(f, state.up)
    dv = np.clip(commanded_speed - state.speed, -max_accel * dt, max_accel * dt)
    speed = float(np.clip(state.speed + dv, 0.0, v_max))
    return DroneState(state.position + f * speed * dt, f, up, right, speed, state.speed)


# ---------------------------------------------------------------------------
# rigid body


def quat_mul(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = p
    w2, x2, y2, z2 = q
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix whose columns are the body axes in world coordinates."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)


def quat_exp(rotvec: np.ndarray) -> np.ndarray:
    """Unit quaternion for a rotation vector (axis * angle)."""
    angle = np.linalg.norm(rotvec)
    if angle < 1e-12:
        return _unit(np.concatenate([[1.0], 0.5 * rotvec]))
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * rotvec / angle])


@dataclass(frozen=True)
class RigidBodyState:
    """Linear quantities in world frame; angular velocity and inertia in the
    body frame (x=right, y=up, z=forward)."""

    position: np.ndarray
    orientation: np.ndarray
    linear_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    mass: float = 1.5
    inertia: np.ndarray = field(default_factory=lambda: np.diag([0.02, 0.03, 0.02]))

    @classmethod
    def from_drone(cls, state: DroneState, **kw) -> "RigidBodyState":
        m = np.column_stack([state.right, state.up, state.forward])
        v = kw.pop("linear_velocity", state.forward * state.speed)
        return cls(state.position.copy(), matrix_to_quat(m), np.asarray(v, dtype=float), **kw)

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def to_drone(self, prev_speed: float = 0.0, v_max: float = np.inf) -> DroneState:
        m = self.rotation()
        f = _unit(m[:, 2])
        up = _unit(m[:, 1] - (m[:, 1] @ f) * f)
        right = np.cross(up, f)
        speed = float(np.clip(self.linear_velocity @ f, 0.0, v_max))
        return DroneState(self.position.copy(), f, up, right, speed, prev_speed)


def integrate_rigid_body(body: RigidBodyState, F_cmd, tau_cmd, g=GRAVITY,
                         dt: float = 0.005) -> RigidBodyState:
    """One semi-implicit Euler step: velocities first, then poses from the
    new velocities.  The gyroscopic term is evaluated at the step midpoint,
    which keeps torque-free rotational energy exactly bounded."""
    if not 0.0 < dt <= 0.01:
        raise ValueError("physics step must lie in (0, 0.01] s")
    F = np.asarray(F_cmd, dtype=float)
    tau = np.asarray(tau_cmd, dtype=float)
    g = np.asarray(g, dtype=float)
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(tau)) and np.all(np.isfinite(g))):
        raise ValueError("non-finite force, torque or gravity")

    v = body.linear_velocity + (F / body.mass + g) * dt
    p = body.position + v * dt

    inertia = body.inertia
    w0 = body.angular_velocity
    w1 = w0.copy()
    for _ in range(50):
        wm = 0.5 * (w0 + w1)
        nxt = w0 + np.linalg.solve(inertia, tau - np.cross(wm, inertia @ wm)) * dt
        if np.max(np.abs(nxt - w1)) <= 1e-15 * max(1.0, np.max(np.abs(nxt))):
            w1 = nxt
            break
        w1 = nxt
    q = quat_mul(body.orientation, quat_exp(w1 * dt))
    q /= np.linalg.norm(q)
    return replace(body, position=p, orientation=q, linear_velocity=v, angular_velocity=w1)


@dataclass(frozen=True)
class ControlGains:
    k_p: float = 8.0  # 1/s, velocity tracking
    compensation: float = 0.9  # fraction of gravity cancelled feed-forward
    k_att: float = 2.0  # N m / rad
    k_rate: float = 0.4  # N m s / rad
    k_roll: float = 1.0  # N m / rad


def gravity_compensated_command(commanded_dir, speed_level: float, body: RigidBodyState,
                                gains: ControlGains = ControlGains(),
                                g=GRAVITY) -> tuple[np.ndarray, np.ndarray]:
    """World-frame force and body-frame torque for a (direction, speed) command."""
    m = body.mass
    d = np.asarray(commanded_dir, dtype=float)
    g = np.asarray(g, dtype=float)
    F = gains.k_p * (d * speed_level - body.linear_velocity) * m + gains.compensation * m * (-g)

    rot = body.rotation()
    fwd, up = rot[:, 2], rot[:, 1]
    err = np.zeros(3)
    if np.linalg.norm(d) > 1e-12:
        d = d / np.linalg.norm(d)
        axis = np.cross(fwd, d)
        s, c = np.linalg.norm(axis), float(fwd @ d)
        if s > 1e-12:
            err = np.arctan2(s, c) * axis / s
        elif c < 0.0:
            err = np.pi * up
    tau = gains.k_att * (rot.T @ err)
    up_ref = WORLD_UP - (WORLD_UP @ fwd) * fwd
    if np.linalg.norm(up_ref) > 1e-6:
        roll = float(np.cross(up, up_ref / np.linalg.norm(up_ref)) @ fwd)
        tau = tau + gains.k_roll * roll * np.array([0.0, 0.0, 1.0])
    tau = tau - gains.k_rate * body.angular_velocity
    return F, tau
