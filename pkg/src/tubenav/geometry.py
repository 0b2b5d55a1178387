"""Procedural tube geometry: raw guide curves, B-spline smoothing, curriculum
blending, centerline projection and OBJ import/export."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

import numpy as np
from scipy.interpolate import splev, splprep
from scipy.optimize import brentq

from . import _kernels

FAMILIES = ("A", "B", "C", "D")

# Max-curvature bands (1/m) each family is allowed to occupy.
CURVATURE_BANDS = {
    "A": (0.0, 0.02),
    "B": (0.02, 0.08),
    "C": (0.08, 0.18),
    "D": (0.15, 0.35),
}

# Target draws sit strictly inside the bands so smoothing/blending slack
# never pushes a curve outside its family.
_TARGET_KAPPA = {
    "A": (0.002, 0.018),
    "B": (0.03, 0.07),
    "C": (0.10, 0.16),
    "D": (0.18, 0.32),
}
_WAVELENGTH = {
    "A": (20.0, 40.0),
    "B": (12.0, 24.0),
    "C": (10.0, 18.0),
    "D": (9.0, 15.0),
}

LEVEL_FAMILIES = {0: ("A", "B"), 1: ("B", "C"), 2: ("C", "D")}

DEFAULT_RADIUS = 1.0
DEFAULT_LENGTH = 30.0
DEFAULT_SAMPLES = 256
RAW_POINTS = 48


@dataclass(frozen=True)
class RawCurve:
    points: np.ndarray
    family_id: str

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 4:
            raise ValueError("a raw curve needs at least 4 points in 3D")
        if np.any(np.linalg.norm(np.diff(pts, axis=0), axis=1) == 0.0):
            raise ValueError("consecutive raw curve points must be distinct")
        if self.family_id not in FAMILIES:
            raise ValueError(f"unknown curve family {self.family_id!r}")
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class Centerline:
    """Arc-length sampled polyline with unit tangents.

    ``positions`` (n, 3), ``tangents`` (n, 3) and ``arclength`` (n,) are
    parallel arrays; ``arclength[0] == 0`` and ``arclength[-1]`` is the
    total length.
    """

    positions: np.ndarray
    tangents: np.ndarray
    arclength: np.ndarray

    @property
    def total_length(self) -> float:
        return float(self.arclength[-1])

    @property
    def n_samples(self) -> int:
        return len(self.positions)

    @cached_property
    def _segments(self):
        a = self.positions[:-1]
        d = self.positions[1:] - a
        return a, d, np.einsum("ij,ij->i", d, d)

    @cached_property
    def _chunks(self):
        return _kernels.chunk_spheres(self.positions)

    def validate(self, max_turn_deg: float = 30.0) -> None:
        if not (np.isfinite(self.positions).all() and np.isfinite(self.tangents).all()):
            raise ValueError("centerline contains non-finite values")
        s = self.arclength
        if s[0] != 0.0 or np.any(np.diff(s) <= 0.0):
            raise ValueError("cumulative arc length must start at 0 and strictly increase")
        norms = np.linalg.norm(self.tangents, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ValueError("tangents must be unit length")
        cosines = np.einsum("ij,ij->i", self.tangents[:-1], self.tangents[1:])
        if np.any(cosines < np.cos(np.radians(max_turn_deg))):
            raise ValueError("adjacent tangents turn by more than the smoothness guard")

    def point_at(self, s: float) -> np.ndarray:
        """Linear interpolation of the sampled positions at arc length ``s``."""
        s = float(np.clip(s, 0.0, self.total_length))
        return np.array([np.interp(s, self.arclength, self.positions[:, k]) for k in range(3)])

    def tangent_at(self, s: float) -> np.ndarray:
        s = float(np.clip(s, 0.0, self.total_length))
        t = np.array([np.interp(s, self.arclength, self.tangents[:, k]) for k in range(3)])
        return t / np.linalg.norm(t)


@dataclass(frozen=True)
class TubeSpec:
    centerline: Centerline
    radius: float = DEFAULT_RADIUS
    level: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("tube radius must be positive")
        if self.centerline.total_length < 10.0 * self.radius:
            raise ValueError("tube must be at least 10 radii long")


def make_centerline(positions: np.ndarray, tangents: np.ndarray | None = None) -> Centerline:
    """Build a centerline from ordered positions, deriving arc length and,
    when not given, tangents by second-order finite differences."""
    positions = np.ascontiguousarray(positions, dtype=float)
    seg = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    arclength = np.concatenate([[0.0], np.cumsum(seg)])
    if tangents is None:
        tangents = np.gradient(positions, arclength, axis=0, edge_order=2)
    tangents = tangents / np.linalg.norm(tangents, axis=1, keepdims=True)
    return Centerline(positions, np.ascontiguousarray(tangents), arclength)


# ---------------------------------------------------------------------------
# curvature helpers


def polyline_curvature(points: np.ndarray) -> np.ndarray:
    """Discrete curvature at interior vertices (circumscribed-circle formula)."""
    p = np.asarray(points, dtype=float)
    a = p[1:-1] - p[:-2]
    b = p[2:] - p[1:-1]
    c = p[2:] - p[:-2]
    cross = np.linalg.norm(np.cross(a, b), axis=1)
    denom = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1) * np.linalg.norm(c, axis=1)
    return 2.0 * cross / denom


def max_curvature(points: np.ndarray) -> float:
    return float(np.max(polyline_curvature(points)))


def _sinusoid_max_kappa(amps, omegas, phases, length, n=2048) -> float:
    u = np.linspace(0.0, length, n)
    arg = omegas[:, None] * u[None, :] + phases[:, None]
    d1 = np.vstack([amps[:, None] * omegas[:, None] * np.cos(arg), np.ones((1, n))])
    d2 = np.vstack([-amps[:, None] * omegas[:, None] ** 2 * np.sin(arg), np.zeros((1, n))])
    cross = np.cross(d1.T, d2.T)
    kappa = np.linalg.norm(cross, axis=1) / np.linalg.norm(d1.T, axis=1) ** 3
    return float(kappa.max())


# ---------------------------------------------------------------------------
# generation


def generate_raw_curve(family: str, length: float, rng: np.random.Generator) -> RawCurve:
    """Sinusoid-perturbed space curve along +z whose maximum curvature is
    tuned to a value drawn from the family's band."""
    if family not in FAMILIES:
        raise ValueError(f"unknown curve family {family!r}")
    if length <= 0:
        raise ValueError("curve length must be positive")

    lo, hi = _TARGET_KAPPA[family]
    kappa_target = rng.uniform(lo, hi)
    wl_lo, wl_hi = _WAVELENGTH[family]
    while True:
        omegas = 2.0 * np.pi / rng.uniform(wl_lo, wl_hi, size=2)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=2)
        shape = rng.uniform(0.3, 1.0, size=2)
        shape[rng.integers(2)] = 1.0

        def excess(scale):
            return _sinusoid_max_kappa(scale * shape, omegas, phases, length) - kappa_target

        # Near-equal frequencies wind into a helix whose curvature saturates
        # below the target; such draws are rejected.
        hi_scale = 1.0
        while excess(hi_scale) < 0.0 and hi_scale < length:
            hi_scale *= 2.0
        if excess(hi_scale) >= 0.0:
            break
    scale = brentq(excess, 0.0, hi_scale, xtol=1e-12)
    amps = scale * shape

    u = np.linspace(0.0, length, RAW_POINTS)
    pts = np.column_stack([
        amps[0] * np.sin(omegas[0] * u + phases[0]),
        amps[1] * np.sin(omegas[1] * u + phases[1]),
        u,
    ])
    pts -= pts[0]
    return RawCurve(pts, family)


def smooth_curve(raw: RawCurve, degree: int = 3, tension: float = 0.0,
                 n_samples: int = DEFAULT_SAMPLES) -> Centerline:
    """Fit a parametric B-spline and resample it uniformly in arc length.

    ``tension`` is the allowed RMS deviation from the raw points as a
    fraction of the mean chord length; 0 interpolates.
    """
    if degree not in (3, 5):
        raise ValueError("spline degree must be 3 or 5")
    if n_samples < 64:
        raise ValueError("need at least 64 centerline samples")
    pts = raw.points
    m = len(pts)
    if m <= degree:
        raise ValueError(f"{m} control points are too few for a degree-{degree} spline")

    chords = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    sigma = tension * chords.mean()
    # Point-reflected padding keeps smoothing splines from curling at the ends.
    pad = min(12, m - 1)
    ext = np.concatenate([2.0 * pts[0] - pts[pad:0:-1], pts, 2.0 * pts[-1] - pts[-2:-pad - 2:-1]])
    ext_chords = np.linalg.norm(np.diff(ext, axis=0), axis=1)
    u = np.concatenate([[0.0], np.cumsum(ext_chords)])
    u_lo, u_hi = u[pad], u[pad + m - 1]
    tck, _ = splprep(ext.T, u=u, k=degree, s=len(ext) * sigma**2)

    dense_u = np.linspace(u_lo, u_hi, 32 * n_samples)
    dense = np.column_stack(splev(dense_u, tck))
    dense_s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(dense, axis=0), axis=1))])
    target_s = np.linspace(0.0, dense_s[-1], n_samples)
    param = np.interp(target_s, dense_s, dense_u)

    positions = np.column_stack(splev(param, tck))
    tangents = np.column_stack(splev(param, tck, der=1))
    cl = make_centerline(positions, tangents)
    cl.validate()
    return cl


def resample(cl: Centerline, n_samples: int) -> np.ndarray:
    """Positions at ``n_samples`` uniformly spaced normalized arc lengths."""
    grid = np.linspace(0.0, 1.0, n_samples)
    u = cl.arclength / cl.total_length
    if len(u) == n_samples and np.array_equal(u, grid):
        return cl.positions.copy()
    return np.column_stack([np.interp(grid, u, cl.positions[:, k]) for k in range(3)])


def blend_curves(c1: Centerline, c2: Centerline, alpha: float) -> Centerline:
    if not 0.1 <= alpha <= 0.9:
        raise ValueError("blend factor must lie in [0.1, 0.9]")
    n = c1.n_samples
    p1 = c1.positions if _is_uniform(c1) else resample(c1, n)
    p2 = c2.positions if (c2.n_samples == n and _is_uniform(c2)) else resample(c2, n)
    blended = (1.0 - alpha) * p1 + alpha * p2
    cl = make_centerline(blended)
    cl.validate()
    return cl


def _is_uniform(cl: Centerline) -> bool:
    return np.array_equal(cl.arclength / cl.total_length, np.linspace(0.0, 1.0, cl.n_samples))


def sample_curriculum_tube(level: int, rng: np.random.Generator | int,
                           radius: float = DEFAULT_RADIUS, length: float = DEFAULT_LENGTH,
                           n_samples: int = DEFAULT_SAMPLES) -> TubeSpec:
    """Draw one tube for a curriculum level.

    An integer ``rng`` is used directly as the tube seed; a generator
    first draws the seed, so a TubeSpec is always reproducible from
    ``(level, seed)`` alone.
    """
    if level not in LEVEL_FAMILIES:
        raise ValueError(f"curriculum level must be 0, 1 or 2, got {level!r}")
    if isinstance(rng, np.random.Generator):
        seed = int(rng.integers(0, 2**63 - 1))
    else:
        seed = int(rng)
    g = np.random.default_rng([seed, level])
    curves = []
    for family in LEVEL_FAMILIES[level]:
        raw = generate_raw_curve(family, length, g)
        degree = int(g.choice([3, 5]))
        tension = float(g.uniform(0.0, 0.5))
        curves.append(smooth_curve(raw, degree, tension, n_samples))
    alpha = float(g.uniform(0.1, 0.9))
    if g.random() < 0.5:
        curves.reverse()
    return TubeSpec(blend_curves(curves[0], curves[1], alpha), radius, level, seed)


def straight_tube(length: float = DEFAULT_LENGTH, radius: float = DEFAULT_RADIUS,
                  n_samples: int = DEFAULT_SAMPLES, direction=(0.0, 0.0, 1.0)) -> TubeSpec:
    d = np.asarray(direction, dtype=float)
    d /= np.linalg.norm(d)
    s = np.linspace(0.0, length, n_samples)
    pos = s[:, None] * d[None, :]
    return TubeSpec(Centerline(pos, np.tile(d, (n_samples, 1)), s), radius, 0, 0)


# ---------------------------------------------------------------------------
# projection queries


@dataclass(frozen=True)
class Projection:
    s: np.ndarray
    q: np.ndarray
    t: np.ndarray
    d_perp: np.ndarray
    segment: np.ndarray
    raw_param: np.ndarray


def project_points(cl: Centerline, pts: np.ndarray) -> Projection:
    """Closest points on the centerline polyline for a batch of points."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    a, d, dd = cl._segments
    rel = pts[:, None, :] - a[None, :, :]
    raw = np.einsum("mnk,nk->mn", rel, d) / dd
    u = np.clip(raw, 0.0, 1.0)
    diff = rel - u[..., None] * d[None, :, :]
    dist2 = np.einsum("mnk,mnk->mn", diff, diff)
    seg = np.argmin(dist2, axis=1)
    rows = np.arange(len(pts))
    uu = u[rows, seg]
    q = a[seg] + uu[:, None] * d[seg]
    s = cl.arclength[seg] + uu * (cl.arclength[seg + 1] - cl.arclength[seg])
    t = (1.0 - uu)[:, None] * cl.tangents[seg] + uu[:, None] * cl.tangents[seg + 1]
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    return Projection(s, q, t, np.sqrt(dist2[rows, seg]), seg, raw[rows, seg])


def nearest_point(cl: Centerline, p) -> tuple[float, np.ndarray, np.ndarray, float]:
    """(arc length, closest point, local tangent, radial distance) for ``p``."""
    pr = project_points(cl, p)
    return float(pr.s[0]), pr.q[0], pr.t[0], float(pr.d_perp[0])


def locate(tube: TubeSpec, p) -> tuple[float, np.ndarray, np.ndarray, float, bool]:
    """Single-point projection with the containment test: (s, q, t, d_perp, inside).

    Compiled counterpart of :func:`project_points` plus :func:`inside_mask`.
    """
    cl = tube.centerline
    p = np.asarray(p, dtype=float)
    centers, radii = cl._chunks
    d2, seg, raw = _kernels.closest_segment(cl.positions, centers, radii, p, 0)
    u = min(max(raw, 0.0), 1.0)
    a = cl.positions[seg]
    q = a + u * (cl.positions[seg + 1] - a)
    s = cl.arclength[seg] + u * (cl.arclength[seg + 1] - cl.arclength[seg])
    t = (1.0 - u) * cl.tangents[seg] + u * cl.tangents[seg + 1]
    t = t / np.linalg.norm(t)
    d_perp = float(np.sqrt(d2))
    inside = (d_perp <= tube.radius and not (seg == 0 and raw < 0.0)
              and not (seg == cl.n_samples - 2 and raw > 1.0))
    return float(s), q, t, d_perp, bool(inside)


def inside_mask(tube: TubeSpec, pts: np.ndarray) -> np.ndarray:
    pr = project_points(tube.centerline, pts)
    last = tube.centerline.n_samples - 2
    before_start = (pr.segment == 0) & (pr.raw_param < 0.0)
    past_end = (pr.segment == last) & (pr.raw_param > 1.0)
    return (pr.d_perp <= tube.radius) & ~before_start & ~past_end


def is_inside(tube: TubeSpec, p) -> bool:
    return bool(inside_mask(tube, p)[0])


# ---------------------------------------------------------------------------
# OBJ export / import


def transport_frames(cl: Centerline, up_hint=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Rotation-minimizing normal/binormal pairs along the centerline."""
    t = cl.tangents
    n = np.empty_like(t)
    hint = np.asarray(up_hint, dtype=float)
    if abs(hint @ t[0]) > 0.9:
        hint = np.array([1.0, 0.0, 0.0])
    n0 = hint - (hint @ t[0]) * t[0]
    n[0] = n0 / np.linalg.norm(n0)
    for i in range(1, len(t)):
        v = n[i - 1] - (n[i - 1] @ t[i]) * t[i]
        n[i] = v / np.linalg.norm(v)
    b = np.cross(t, n)
    return n, b


def tube_mesh(tube: TubeSpec, circle_segments: int) -> tuple[np.ndarray, np.ndarray]:
    """Ring-extruded surface: vertices (N*segments, 3) and 0-based triangles."""
    if circle_segments < 8:
        raise ValueError("need at least 8 circle segments")
    cl = tube.centerline
    n, b = transport_frames(cl)
    theta = 2.0 * np.pi * np.arange(circle_segments) / circle_segments
    ring = np.cos(theta)[None, :, None] * n[:, None, :] + np.sin(theta)[None, :, None] * b[:, None, :]
    verts = (cl.positions[:, None, :] + tube.radius * ring).reshape(-1, 3)

    i = np.arange(cl.n_samples - 1)[:, None]
    j = np.arange(circle_segments)[None, :]
    jn = (j + 1) % circle_segments
    v00 = i * circle_segments + j
    v10 = (i + 1) * circle_segments + j
    v11 = (i + 1) * circle_segments + jn
    v01 = i * circle_segments + jn
    tris = np.concatenate([
        np.stack([v00, v10, v11], axis=-1).reshape(-1, 3),
        np.stack([v00, v11, v01], axis=-1).reshape(-1, 3),
    ])
    return verts, tris


def export_obj(tube: TubeSpec, circle_segments: int = 32) -> tuple[bytes, bytes]:
    verts, tris = tube_mesh(tube, circle_segments)
    mesh = io.StringIO()
    mesh.write(f"# tube radius {tube.radius!r} level {tube.level} seed {tube.seed}\n")
    mesh.write(f"o tube_{tube.seed}\n")
    for x, y, z in verts:
        mesh.write(f"v {x:.9f} {y:.9f} {z:.9f}\n")
    for a, b, c in tris + 1:
        mesh.write(f"f {a} {b} {c}\n")

    line = io.StringIO()
    line.write(f"o centerline_{tube.seed}\n")
    for x, y, z in tube.centerline.positions:
        line.write(f"v {x:.9f} {y:.9f} {z:.9f}\n")
    line.write("l " + " ".join(str(k + 1) for k in range(tube.centerline.n_samples)) + "\n")
    return mesh.getvalue().encode("ascii"), line.getvalue().encode("ascii")


@dataclass
class ObjData:
    vertices: np.ndarray
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=int))
    lines: list[np.ndarray] = field(default_factory=list)


def parse_obj(data: bytes | str | Iterable[str]) -> ObjData:
    """Minimal OBJ reader: ``v``, ``f`` (fan-triangulated) and ``l`` records."""
    if isinstance(data, bytes):
        data = data.decode("ascii")
    if isinstance(data, str):
        data = data.splitlines()
    verts, faces, lines = [], [], []
    for raw in data:
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        if tag == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif tag == "f":
            idx = [_obj_index(tok, len(verts)) for tok in parts[1:]]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
        elif tag == "l":
            lines.append(np.array([_obj_index(tok, len(verts)) for tok in parts[1:]]))
    return ObjData(np.array(verts, dtype=float).reshape(-1, 3),
                   np.array(faces, dtype=int).reshape(-1, 3), lines)


def _obj_index(token: str, n_verts: int) -> int:
    k = int(token.split("/")[0])
    return k - 1 if k > 0 else n_verts + k


def centerline_from_obj(obj: ObjData) -> Centerline:
    """Centerline from the first polyline record (or the bare vertex list)."""
    if obj.lines:
        pts = obj.vertices[obj.lines[0]]
    else:
        pts = obj.vertices
    if len(pts) < 4:
        raise ValueError("centerline OBJ holds fewer than 4 points")
    return make_centerline(pts)


def fit_radius(mesh_vertices: np.ndarray, cl: Centerline, max_spread: float = 0.10) -> float:
    """Median vertex-to-centerline distance; rejects inconsistent assets."""
    d = project_points(cl, mesh_vertices).d_perp
    r = float(np.median(d))
    if r <= 0 or np.std(d) / r > max_spread:
        raise ValueError(f"mesh and centerline disagree: radius spread {np.std(d) / max(r, 1e-12):.3f}")
    return r
