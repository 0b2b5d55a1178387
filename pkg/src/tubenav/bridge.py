"""Lockstep command/pose protocol between a policy driver and a physics plant.

Wire format (little-endian, fixed offsets):

* command frame, 32 bytes: ``u64 seq | 3 x f32 direction | f32 speed | u32 flags | pad``
* pose frame, 64 bytes: ``u64 seq | 3 x f32 position | 4 x f32 quaternion (w, x, y, z)
  | 3 x f32 linear velocity | 3 x f32 angular velocity | pad``

Shared-memory layout: command slot at bytes [0, 32), pose slot at [64, 128).
Each slot has exactly one writer; the payload is written before the sequence
number, and readers poll the sequence number.
"""
from __future__ import annotations

import queue
import struct
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from multiprocessing import shared_memory
from pathlib import Path

import numpy as np

from .config import Config
from .dynamics import (GRAVITY, ControlGains, DroneState, RigidBodyState, action_to_direction,
                       gravity_compensated_command, integrate_rigid_body)
from .env import Terminal, TubeNavEnv
from .geometry import TubeSpec, centerline_from_obj, fit_radius, parse_obj

COMMAND_SIZE, POSE_SIZE = 32, 64
COMMAND_OFFSET, POSE_OFFSET, REGION_SIZE = 0, 64, 128
FLAG_RESET, FLAG_SHUTDOWN = 1, 2

_CMD = struct.Struct("<Q3ffI4x")
_POSE = struct.Struct("<Q3f4f3f3f4x")
assert _CMD.size == COMMAND_SIZE and _POSE.size == POSE_SIZE


class FrameError(ValueError):
    """Malformed frame bytes."""


class ProtocolError(RuntimeError):
    """Lockstep discipline violated (sequence regression, double send...)."""


class ConfigurationError(RuntimeError):
    """Assets or checkpoint unusable for an inference session."""


def _f32(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float32).reshape(-1)


@dataclass(frozen=True)
class CommandFrame:
    seq: int
    direction: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))
    speed: float = 0.0
    flags: int = 0

    @property
    def reset(self) -> bool:
        return bool(self.flags & FLAG_RESET)

    @property
    def shutdown(self) -> bool:
        return bool(self.flags & FLAG_SHUTDOWN)

    def __eq__(self, other) -> bool:
        return isinstance(other, CommandFrame) and encode_command(self) == encode_command(other)


@dataclass(frozen=True)
class PoseFrame:
    seq: int
    position: np.ndarray
    orientation: np.ndarray
    linear_velocity: np.ndarray
    angular_velocity: np.ndarray

    @classmethod
    def from_body(cls, seq: int, body: RigidBodyState) -> "PoseFrame":
        return cls(seq, _f32(body.position), _f32(body.orientation), _f32(body.linear_velocity),
                   _f32(body.angular_velocity))

    def __eq__(self, other) -> bool:
        return isinstance(other, PoseFrame) and encode_pose(self) == encode_pose(other)


def encode_command(f: CommandFrame) -> bytes:
    d = _f32(f.direction)
    vals = np.concatenate([d, _f32(f.speed)])
    if d.shape != (3,) or not np.all(np.isfinite(vals)):
        raise FrameError("command direction must be 3 finite floats and speed finite")
    return _CMD.pack(int(f.seq), *d.tolist(), float(vals[3]), int(f.flags))


def decode_command(buf: bytes) -> CommandFrame:
    if len(buf) != COMMAND_SIZE:
        raise FrameError(f"command frame must be {COMMAND_SIZE} bytes, got {len(buf)}")
    seq, dx, dy, dz, speed, flags = _CMD.unpack(bytes(buf))
    d = np.array([dx, dy, dz], dtype=np.float32)
    if not (np.all(np.isfinite(d)) and np.isfinite(speed)):
        raise FrameError("non-finite value in command frame")
    return CommandFrame(seq, d, float(np.float32(speed)), flags)


def encode_pose(f: PoseFrame) -> bytes:
    parts = [_f32(f.position), _f32(f.orientation), _f32(f.linear_velocity),
             _f32(f.angular_velocity)]
    if [len(p) for p in parts] != [3, 4, 3, 3]:
        raise FrameError("pose frame field has the wrong length")
    vals = np.concatenate(parts)
    if not np.all(np.isfinite(vals)):
        raise FrameError("non-finite value in pose frame")
    return _POSE.pack(int(f.seq), *vals.tolist())


def decode_pose(buf: bytes) -> PoseFrame:
    if len(buf) != POSE_SIZE:
        raise FrameError(f"pose frame must be {POSE_SIZE} bytes, got {len(buf)}")
    seq, *vals = _POSE.unpack(bytes(buf))
    v = np.array(vals, dtype=np.float32)
    if not np.all(np.isfinite(v)):
        raise FrameError("non-finite value in pose frame")
    return PoseFrame(seq, v[0:3], v[3:7], v[7:10], v[10:13])


def body_from_pose(frame: PoseFrame, template: RigidBodyState) -> RigidBodyState:
    q = frame.orientation.astype(float)
    return replace(template, position=frame.position.astype(float), orientation=q / np.linalg.norm(q),
                   linear_velocity=frame.linear_velocity.astype(float),
                   angular_velocity=frame.angular_velocity.astype(float))


# ---------------------------------------------------------------------------
# channels


class Phase(str, Enum):
    AWAITING_COMMAND = "awaiting-command"
    AWAITING_POSE = "awaiting-pose"


class _Channel:
    """Two-state lockstep bookkeeping shared by both transports."""

    def __init__(self, timeout: float = 30.0):
        self.timeout = timeout
        self.phase = Phase.AWAITING_COMMAND
        self.pending_seq: int | None = None

    def exchange(self, cmd: CommandFrame) -> PoseFrame:
        """Driver side: send one command and block for the pose echoing it."""
        if self.phase != Phase.AWAITING_COMMAND:
            raise ProtocolError("a command is already in flight")
        self._write_command(encode_command(cmd))
        self.phase, self.pending_seq = Phase.AWAITING_POSE, cmd.seq
        pose = decode_pose(self._read_pose(cmd.seq))
        if pose.seq != cmd.seq:
            raise ProtocolError(f"pose answers seq {pose.seq}, expected {cmd.seq}")
        self.phase, self.pending_seq = Phase.AWAITING_COMMAND, None
        return pose

    def wait_command(self) -> CommandFrame:
        """Plant side: block until a fresh command arrives."""
        return decode_command(self._read_command())

    def post_pose(self, pose: PoseFrame) -> None:
        self._write_pose(encode_pose(pose))

    def close(self) -> None:
        pass


class InProcChannel(_Channel):
    """Queue transport for a driver and a plant running on two threads."""

    def __init__(self, timeout: float = 30.0):
        super().__init__(timeout)
        self._cmd: queue.Queue[bytes] = queue.Queue(maxsize=1)
        self._pose: queue.Queue[bytes] = queue.Queue(maxsize=1)

    def _write_command(self, b: bytes) -> None:
        self._cmd.put(b, timeout=self.timeout)

    def _read_command(self) -> bytes:
        return self._cmd.get(timeout=self.timeout)

    def _write_pose(self, b: bytes) -> None:
        self._pose.put(b, timeout=self.timeout)

    def _read_pose(self, seq: int) -> bytes:
        return self._pose.get(timeout=self.timeout)


class ShmChannel(_Channel):
    """OS shared-memory transport with seq-echo polling.

    The creating side owns (and unlinks) the region; the other side attaches
    by name.
    """

    def __init__(self, name: str | None = None, create: bool = True, timeout: float = 30.0,
                 poll_sleep: float = 2e-5):
        super().__init__(timeout)
        self.owner = create
        self.shm = shared_memory.SharedMemory(name=name, create=create,
                                              size=REGION_SIZE if create else 0)
        if create:
            self.shm.buf[:REGION_SIZE] = bytes(REGION_SIZE)
        else:
            # attaching must not hand the region to this process's resource tracker
            from multiprocessing import resource_tracker
            try:
                resource_tracker.unregister(self.shm._name, "shared_memory")
            except Exception:
                pass
        self.name = self.shm.name
        self.poll_sleep = poll_sleep
        self._last_cmd_seq = 0

    def _write_slot(self, offset: int, b: bytes) -> None:
        buf = self.shm.buf
        buf[offset + 8:offset + len(b)] = b[8:]
        buf[offset:offset + 8] = b[:8]

    def _slot_seq(self, offset: int) -> int:
        return struct.unpack_from("<Q", self.shm.buf, offset)[0]

    def _poll(self, offset: int, size: int, ready) -> bytes:
        deadline = time.monotonic() + self.timeout
        spins = 0
        while True:
            seq = self._slot_seq(offset)
            if ready(seq):
                return bytes(self.shm.buf[offset:offset + size])
            spins += 1
            if spins > 200:
                time.sleep(self.poll_sleep)
                if time.monotonic() > deadline:
                    raise TimeoutError("peer did not answer in time")

    def _write_command(self, b: bytes) -> None:
        self._write_slot(COMMAND_OFFSET, b)

    def _read_command(self) -> bytes:
        last = self._last_cmd_seq
        b = self._poll(COMMAND_OFFSET, COMMAND_SIZE, lambda s: s != last)
        self._last_cmd_seq = struct.unpack_from("<Q", b, 0)[0]
        return b

    def _write_pose(self, b: bytes) -> None:
        self._write_slot(POSE_OFFSET, b)

    def _read_pose(self, seq: int) -> bytes:
        return self._poll(POSE_OFFSET, POSE_SIZE, lambda s: s == seq)

    def close(self) -> None:
        try:
            self.shm.close()
            if self.owner:
                self.shm.unlink()
        except FileNotFoundError:
            pass


def make_channel(transport: str, shm_name: str | None = None, **kw) -> _Channel:
    if transport == "inproc":
        return InProcChannel(**kw)
    if transport == "shm":
        return ShmChannel(shm_name, create=True, **kw)
    raise ValueError(f"unknown transport {transport!r}")


# ---------------------------------------------------------------------------
# plant


@dataclass
class PlantReport:
    body: RigidBodyState
    answered: list[int]
    substeps: int


class Plant:
    """Rigid-body stand-in for the external physics engine."""

    def __init__(self, initial: RigidBodyState, dt_control: float = 0.1,
                 delta_t_physics: float = 0.005, gains: ControlGains = ControlGains(),
                 g=GRAVITY):
        ratio = dt_control / delta_t_physics
        n = int(round(ratio))
        if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, ratio):
            raise ValueError("dt_control must be an integer multiple of delta_t_physics")
        self.initial = initial
        self.body = initial
        self.n_substeps = n
        self.delta_t = delta_t_physics
        self.gains = gains
        self.g = np.asarray(g, dtype=float)
        self.last_seq = 0
        self.answered: list[int] = []
        self.substeps = 0

    def handle(self, cmd: CommandFrame) -> PoseFrame:
        if cmd.seq <= self.last_seq:
            raise ProtocolError(f"sequence regression: got {cmd.seq} after {self.last_seq}")
        if cmd.reset:
            self.body = self.initial
        elif not cmd.shutdown:
            d = cmd.direction.astype(float)
            n = np.linalg.norm(d)
            if not 0.99 <= n <= 1.01:
                raise ProtocolError(f"command direction norm {n:.4f} is not unit")
            for _ in range(self.n_substeps):
                F, tau = gravity_compensated_command(d, cmd.speed, self.body, self.gains, self.g)
                self.body = integrate_rigid_body(self.body, F, tau, self.g, self.delta_t)
            self.substeps += self.n_substeps
        self.last_seq = cmd.seq
        self.answered.append(cmd.seq)
        return PoseFrame.from_body(cmd.seq, self.body)


def plant_loop(initial: RigidBodyState, channel: _Channel, dt_control: float = 0.1,
               delta_t_physics: float = 0.005, gains: ControlGains = ControlGains(),
               g=GRAVITY) -> PlantReport:
    """Serve commands until one carries the shutdown flag (answered, then exit)."""
    plant = Plant(initial, dt_control, delta_t_physics, gains, g)
    while True:
        cmd = channel.wait_command()
        channel.post_pose(plant.handle(cmd))
        if cmd.shutdown:
            return PlantReport(plant.body, plant.answered, plant.substeps)


def start_body(tube: TubeSpec, config: Config) -> RigidBodyState:
    """Rigid body at the tube entrance, aligned with the initial tangent, at
    the lowest speed level (the same pose the environment resets to)."""
    cl = tube.centerline
    state = DroneState.aligned(cl.positions[0], cl.tangents[0], speed=0.25 * config.dynamics.v_max)
    return RigidBodyState.from_drone(state, mass=config.dynamics.mass)


def gains_from_config(config: Config) -> ControlGains:
    d = config.dynamics
    return ControlGains(d.k_p, d.compensation, d.k_att, d.k_rate, d.k_roll)


def load_tube_assets(tube_obj_path: str | Path, centerline_obj_path: str | Path) -> TubeSpec:
    for p in (tube_obj_path, centerline_obj_path):
        if not Path(p).is_file():
            raise ConfigurationError(f"missing asset file: {p}")
    mesh = parse_obj(Path(tube_obj_path).read_bytes())
    try:
        cl = centerline_from_obj(parse_obj(Path(centerline_obj_path).read_bytes()))
        radius = fit_radius(mesh.vertices, cl)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    return TubeSpec(cl, radius)


@dataclass
class DriverResult:
    record: object  # evaluation.EpisodeRecord
    frames_answered: int
    loop_steps: int


def inference_driver(checkpoint, tube_obj_path, centerline_obj_path, channel: _Channel,
                     config: Config | None = None, time_limit_steps: int | None = None,
                     shutdown: bool = True) -> DriverResult:
    """Closed loop: observation -> greedy action -> command -> plant pose -> progress.

    The plant must have been started from :func:`start_body` for the same tube.
    """
    from .evaluation import EpisodeRecord, StepLog
    from .ppo.checkpoint import load_checkpoint
    from .ppo.network import PolicyParams, greedy_action

    config = config or Config()
    tube = load_tube_assets(tube_obj_path, centerline_obj_path)
    if isinstance(checkpoint, PolicyParams):
        params = checkpoint
    else:
        try:
            params, _ = load_checkpoint(checkpoint)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigurationError(f"cannot load checkpoint: {exc}") from exc
    limit = time_limit_steps or config.bridge.time_limit_steps

    env = TubeNavEnv(config)
    obs = env.reset(tube=tube)
    template = start_body(tube, config)
    seq = 1
    pose = channel.exchange(CommandFrame(seq, np.zeros(3, dtype=np.float32), 0.0, FLAG_RESET))
    answered = 0  # control frames only; the reset and shutdown handshakes are extra
    body = body_from_pose(pose, template)
    steps: list[StepLog] = []
    terminal = Terminal.RUNNING
    loop_steps = 0
    while terminal == Terminal.RUNNING:
        action = greedy_action(params, obs)
        pair, speed = env.action_space.decode(action)
        direction = action_to_direction(env.state, pair)
        seq += 1
        pose = channel.exchange(CommandFrame(seq, _f32(direction), speed, 0))
        answered += 1
        loop_steps += 1
        body = body_from_pose(pose, template)
        state = body.to_drone(prev_speed=env.state.speed, v_max=config.dynamics.v_max)
        out = env.apply_state(state)
        steps.append(StepLog.from_info(out.info, out.reward))
        obs = out.observation
        terminal = out.terminal
        if terminal == Terminal.RUNNING and loop_steps >= limit:
            terminal = Terminal.TIMEOUT
    if shutdown:
        seq += 1
        channel.exchange(CommandFrame(seq, np.zeros(3, dtype=np.float32), 0.0, FLAG_SHUTDOWN))
    record = EpisodeRecord(steps, terminal, tube.seed, tube.level, "ppo-bridge")
    return DriverResult(record, answered, loop_steps)
