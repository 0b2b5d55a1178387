"""Compiled inner loops for polyline distance queries and ray marching.

These mirror ``geometry.project_points`` and ``sensing.raycast_reference``
and are cross-checked against them in the test-suite.  Segments are grouped
into chunks with bounding spheres; a chunk is skipped only when its sphere
is provably farther than the best segment found so far, so results are
exact.
"""
from __future__ import annotations

import numpy as np
from numba import njit

CHUNK = 16


def chunk_spheres(positions: np.ndarray, chunk: int = CHUNK) -> tuple[np.ndarray, np.ndarray]:
    """Bounding sphere (center, radius) of every run of ``chunk`` segments."""
    n_seg = len(positions) - 1
    n_chunks = (n_seg + chunk - 1) // chunk
    centers = np.empty((n_chunks, 3))
    radii = np.empty(n_chunks)
    for c in range(n_chunks):
        pts = positions[c * chunk:min((c + 1) * chunk, n_seg) + 1]
        centers[c] = pts.mean(axis=0)
        # segments lie in the convex hull of their end points
        radii[c] = np.max(np.linalg.norm(pts - centers[c], axis=1)) * (1.0 + 1e-12) + 1e-12
    return centers, radii


@njit(cache=True)
def _scan(positions, lo, hi, px, py, pz, best, best_seg, best_u):
    for i in range(lo, hi):
        ax, ay, az = positions[i, 0], positions[i, 1], positions[i, 2]
        dx = positions[i + 1, 0] - ax
        dy = positions[i + 1, 1] - ay
        dz = positions[i + 1, 2] - az
        rx, ry, rz = px - ax, py - ay, pz - az
        dd = dx * dx + dy * dy + dz * dz
        raw = (rx * dx + ry * dy + rz * dz) / dd
        u = raw
        if u < 0.0:
            u = 0.0
        elif u > 1.0:
            u = 1.0
        ex, ey, ez = rx - u * dx, ry - u * dy, rz - u * dz
        d2 = ex * ex + ey * ey + ez * ez
        if d2 < best or (d2 == best and i < best_seg):
            best = d2
            best_seg = i
            best_u = raw
    return best, best_seg, best_u


@njit(cache=True)
def closest_segment(positions, centers, radii, p, hint):
    """(squared distance, segment index, unclipped segment parameter).

    Ties resolve to the lower segment index.  ``hint`` is the chunk to scan
    first; a good hint lets most other chunks be culled.
    """
    n_seg = positions.shape[0] - 1
    n_chunks = centers.shape[0]
    px, py, pz = p[0], p[1], p[2]
    lo = hint * CHUNK
    hi = min(lo + CHUNK, n_seg)
    best, best_seg, best_u = _scan(positions, lo, hi, px, py, pz, np.inf, n_seg, 0.0)
    for c in range(n_chunks):
        if c == hint:
            continue
        cx = px - centers[c, 0]
        cy = py - centers[c, 1]
        cz = pz - centers[c, 2]
        lb = np.sqrt(cx * cx + cy * cy + cz * cz) - radii[c]
        if lb > 0.0 and lb * lb * (1.0 - 1e-9) > best:
            continue
        lo = c * CHUNK
        hi = min(lo + CHUNK, n_seg)
        best, best_seg, best_u = _scan(positions, lo, hi, px, py, pz, best, best_seg, best_u)
    return best, best_seg, best_u


@njit(cache=True)
def polyline_distance(positions, centers, radii, p, hint):
    d2, seg, _ = closest_segment(positions, centers, radii, p, hint)
    return np.sqrt(d2), seg


@njit(cache=True)
def raycast(positions, centers, radii, radius, origins, dirs, t_max, tol, max_iter):
    n = origins.shape[0]
    out = np.zeros(n)
    p = np.empty(3)
    hint = 0
    for k in range(n):
        for j in range(3):
            p[j] = origins[k, j]
        d0, seg = polyline_distance(positions, centers, radii, p, hint)
        hint = seg // CHUNK
        clear = radius - d0
        if clear <= 0.0:
            out[k] = 0.0
            continue
        t = 0.0
        for _ in range(max_iter):
            t = min(t + clear, t_max)
            for j in range(3):
                p[j] = origins[k, j] + t * dirs[k, j]
            d, seg = polyline_distance(positions, centers, radii, p, hint)
            hint = seg // CHUNK
            clear = radius - d
            if clear <= tol * radius or t >= t_max:
                break
        out[k] = t
    return out


@njit(cache=True)
def segment_inside(positions, centers, radii, radius, a, b, spacing):
    length = np.sqrt((b[0] - a[0]) ** 2 + (b[1] - a[1]) ** 2 + (b[2] - a[2]) ** 2)
    n = max(2, int(np.ceil(length / spacing)) + 1)
    p = np.empty(3)
    hint = 0
    for i in range(n):
        w = i / (n - 1)
        for j in range(3):
            p[j] = (1.0 - w) * a[j] + w * b[j]
        d, seg = polyline_distance(positions, centers, radii, p, hint)
        hint = seg // CHUNK
        if d > radius:
            return False
    return True
