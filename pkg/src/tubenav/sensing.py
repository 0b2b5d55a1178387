"""Perimeter LiDAR rings, idealized tube-center camera and directional memory."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dynamics import CameraIntrinsics, DroneState
from . import _kernels
from .geometry import Centerline, TubeSpec, locate, project_points

FRONT, REAR = "front", "rear"


@dataclass(frozen=True)
class LidarScan:
    ring: str
    distances: np.ndarray
    beam_angles: np.ndarray
    degenerate: bool = False


@dataclass(frozen=True)
class LidarFeatures:
    h_f: float
    v_f: float
    h_r: float
    v_r: float
    s_f: float
    s_r: float
    m_f: float
    m_r: float
    l_min: float
    c_turn: float
    r_fl: float
    r_fr: float
    r_ft: float
    r_fb: float
    r_rl: float
    r_rr: float
    r_rt: float
    r_rb: float


@dataclass(frozen=True)
class TargetObservation:
    direction_local: np.ndarray
    depth_norm: float
    visible: bool
    direction_world: np.ndarray
    alignment: float = 0.0


@dataclass(frozen=True)
class DirectionalMemory:
    last_direction_world: np.ndarray
    last_direction_local: np.ndarray
    steps_since_seen: int = 0
    valid: bool = False

    @classmethod
    def empty(cls) -> "DirectionalMemory":
        return cls(np.zeros(3), np.zeros(3), 0, False)


def beam_angles(n_beams: int) -> np.ndarray:
    return 2.0 * np.pi * np.arange(n_beams) / n_beams


def raycast(tube: TubeSpec, origins: np.ndarray, dirs: np.ndarray, t_max: float,
            tol: float = 1e-6, max_iter: int = 64) -> np.ndarray:
    """Distance along each ray to the tube wall, capped at ``t_max``.

    Sphere tracing on the wall clearance ``R - d_perp``: the clearance is a
    lower bound on the distance to the tube surface, so every step is safe.
    Rays starting outside the tube return 0.
    """
    centers, radii = tube.centerline._chunks
    return _kernels.raycast(tube.centerline.positions, centers, radii, float(tube.radius),
                            np.ascontiguousarray(np.atleast_2d(origins), dtype=float),
                            np.ascontiguousarray(np.atleast_2d(dirs), dtype=float),
                            float(t_max), tol, max_iter)


def raycast_reference(tube: TubeSpec, origins: np.ndarray, dirs: np.ndarray, t_max: float,
                      tol: float = 1e-6, max_iter: int = 64) -> np.ndarray:
    """Vectorized numpy version of :func:`raycast`."""
    cl = tube.centerline
    R = tube.radius
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    t = np.zeros(len(origins))
    clear0 = R - project_points(cl, origins).d_perp
    active = clear0 > 0.0
    step = np.where(active, clear0, 0.0)
    it = 0
    while np.any(active) and it < max_iter:
        t[active] = np.minimum(t[active] + step[active], t_max)
        idx = np.flatnonzero(active)
        clear = R - project_points(cl, origins[idx] + t[idx, None] * dirs[idx]).d_perp
        done = (clear <= tol * R) | (t[idx] >= t_max)
        step[idx] = clear
        active[idx[done]] = False
        it += 1
    return t


def lidar_scan(tube: TubeSpec, pose: DroneState, ring: str, n_beams: int = 36,
               d_max: float = 5.0, ring_offset: float = 0.15) -> LidarScan:
    if n_beams < 8:
        raise ValueError("a LiDAR ring needs at least 8 beams")
    angles = beam_angles(n_beams)
    if not locate(tube, pose.position)[4]:
        return LidarScan(ring, np.zeros(n_beams), angles, degenerate=True)
    sign = 1.0 if ring == FRONT else -1.0
    origin = pose.position + sign * ring_offset * pose.forward
    dirs = np.cos(angles)[:, None] * pose.right + np.sin(angles)[:, None] * pose.up
    dist = raycast(tube, np.tile(origin, (n_beams, 1)), dirs, d_max)
    return LidarScan(ring, np.clip(dist / d_max, 0.0, 1.0), angles)


def lidar_rings(tube: TubeSpec, pose: DroneState, n_beams: int = 36, d_max: float = 5.0,
                ring_offset: float = 0.15) -> tuple[LidarScan, LidarScan]:
    """Front and rear scans traced in one batch."""
    angles = beam_angles(n_beams)
    if not locate(tube, pose.position)[4]:
        zeros = np.zeros(n_beams)
        return (LidarScan(FRONT, zeros, angles, True), LidarScan(REAR, zeros.copy(), angles, True))
    dirs = np.cos(angles)[:, None] * pose.right + np.sin(angles)[:, None] * pose.up
    origins = np.concatenate([
        np.tile(pose.position + ring_offset * pose.forward, (n_beams, 1)),
        np.tile(pose.position - ring_offset * pose.forward, (n_beams, 1)),
    ])
    dist = np.clip(raycast(tube, origins, np.concatenate([dirs, dirs]), d_max) / d_max, 0.0, 1.0)
    return LidarScan(FRONT, dist[:n_beams], angles), LidarScan(REAR, dist[n_beams:], angles)


def sector_means(scan: LidarScan) -> tuple[float, float, float, float]:
    """(left, right, top, bottom) quarter-arc means.

    Angles are measured from +right towards +up; each sector is the
    half-open quarter arc centered on its axis.
    """
    a = np.mod(scan.beam_angles + np.pi / 4, 2.0 * np.pi)
    sector = np.floor(a / (np.pi / 2)).astype(int) % 4  # 0=R 1=T 2=L 3=B
    d = scan.distances
    means = [float(d[sector == k].mean()) for k in range(4)]
    return means[2], means[0], means[1], means[3]


def lidar_features(front: LidarScan, rear: LidarScan) -> LidarFeatures:
    fl, fr, ft, fb = sector_means(front)
    rl, rr, rt, rb = sector_means(rear)
    h_f, v_f = fr - fl, ft - fb
    h_r, v_r = rr - rl, rt - rb
    s_f = 1.0 - 0.5 * (abs(h_f) + abs(v_f))
    s_r = 1.0 - 0.5 * (abs(h_r) + abs(v_r))
    m_f = float(front.distances.mean())
    m_r = float(rear.distances.mean())
    l_min = float(min(front.distances.min(), rear.distances.min()))
    c_turn = turn_confidence(s_f, s_r, m_f, m_r)
    return LidarFeatures(h_f, v_f, h_r, v_r, s_f, s_r, m_f, m_r, l_min, c_turn,
                         fl, fr, ft, fb, rl, rr, rt, rb)


def turn_confidence(s_f: float, s_r: float, m_f: float, m_r: float) -> float:
    return float(np.clip((s_r - s_f) + max(m_r - m_f, 0.0), 0.0, 1.0))


def camera_detect(tube: TubeSpec, pose: DroneState, intrinsics: CameraIntrinsics,
                  lookahead_window: float = 4.0, depth_range: float = 5.0,
                  occlusion_step: float = 0.05, s_drone: float | None = None) -> TargetObservation:
    """Idealized center detection of the centerline point one lookahead
    window ahead; visible when inside both FOV half-angles (inclusive) and
    the line of sight stays inside the tube."""
    cl = tube.centerline
    if s_drone is None:
        s_drone = locate(tube, pose.position)[0]
    target = cl.point_at(s_drone + lookahead_window)
    v = target - pose.position
    dist = float(np.linalg.norm(v))
    hidden = TargetObservation(np.zeros(3), 0.0, False, np.zeros(3), 0.0)
    if dist <= 1e-12:
        return hidden
    u = v / dist
    local = np.array([u @ pose.right, u @ pose.up, u @ pose.forward])
    # tan comparison with a relative slack so the FOV boundary is inclusive
    slack = 1.0 + 1e-9
    in_fov = (local[2] > 0.0
              and abs(local[0]) <= intrinsics.f_w / intrinsics.c * local[2] * slack
              and abs(local[1]) <= intrinsics.f_h / intrinsics.c * local[2] * slack)
    if not in_fov or not segment_clear(tube, pose.position, target, occlusion_step * tube.radius):
        return TargetObservation(np.zeros(3), 0.0, False, np.zeros(3), float(local[2]))
    return TargetObservation(local, float(np.clip(dist / depth_range, 0.0, 1.0)), True, u,
                             float(local[2]))


def segment_clear(tube: TubeSpec, a: np.ndarray, b: np.ndarray, spacing: float) -> bool:
    """True when every sample of the segment a->b lies within the tube."""
    centers, radii = tube.centerline._chunks
    return bool(_kernels.segment_inside(tube.centerline.positions, centers, radii,
                                        float(tube.radius),
                                        np.asarray(a, dtype=float), np.asarray(b, dtype=float),
                                        float(spacing)))


def update_memory(mem: DirectionalMemory, obs: TargetObservation, memory_horizon: int,
                  pose: DroneState) -> DirectionalMemory:
    """Remember the last seen target direction (world frame) and re-express
    it in the current body frame."""
    if obs.visible:
        world = np.asarray(obs.direction_world, dtype=float)
        return DirectionalMemory(world, to_local(pose, world), 0, True)
    steps = mem.steps_since_seen + 1
    valid = mem.valid and steps <= memory_horizon
    if not valid:
        return DirectionalMemory(mem.last_direction_world, np.zeros(3), steps, False)
    return replace(mem, last_direction_local=to_local(pose, mem.last_direction_world),
                   steps_since_seen=steps, valid=True)


def to_local(pose: DroneState, v: np.ndarray) -> np.ndarray:
    return np.array([v @ pose.right, v @ pose.up, v @ pose.forward])


def visual_alignment(pose: DroneState, target_world: np.ndarray) -> float:
    """Dot product of the forward axis with the unit camera-to-target vector."""
    v = np.asarray(target_world, dtype=float) - pose.position
    return float(pose.forward @ (v / np.linalg.norm(v)))


def tube_axis_at(cl: Centerline, s: float) -> np.ndarray:
    return cl.tangent_at(s)
