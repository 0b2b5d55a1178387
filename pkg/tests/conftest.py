from __future__ import annotations

import functools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tubenav.geometry import sample_curriculum_tube, straight_tube

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@functools.lru_cache(maxsize=None)
def curriculum_tube(level: int, seed: int):
    return sample_curriculum_tube(level, seed)


@pytest.fixture
def straight():
    return straight_tube()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def triangle_raycast(vertices: np.ndarray, faces: np.ndarray, origin: np.ndarray,
                     dirs: np.ndarray) -> np.ndarray:
    """Nearest hit distance of each ray against a triangle soup (Moller-Trumbore)."""
    v0 = vertices[faces[:, 0]]
    e1 = vertices[faces[:, 1]] - v0
    e2 = vertices[faces[:, 2]] - v0
    out = np.full(len(dirs), np.inf)
    for k, d in enumerate(dirs):
        pvec = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, pvec)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = origin - v0
        u = np.einsum("ij,ij->i", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        v = (qvec @ d) * inv
        t = np.einsum("ij,ij->i", e2, qvec) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-12)
        if np.any(hit):
            out[k] = t[hit].min()
    return out


# --- acceptance report --------------------------------------------------------------

ACCEPTANCE: dict[int, dict] = {}


def criterion(number: int, title: str):
    """Record a test's outcome under an acceptance criterion; a criterion
    passes only when every test filed under it passes."""
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            entry = ACCEPTANCE.setdefault(number, {"title": title, "results": []})
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                if type(exc).__name__ == "Skipped":
                    raise
                entry["results"].append((fn.__name__, False, f"{type(exc).__name__}: {exc}"))
                raise
            entry["results"].append((fn.__name__, True, detail or ""))
        return run
    return wrap


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        entry = ACCEPTANCE[n]
        ok = all(passed for _, passed, _ in entry["results"])
        # on failure show only what failed
        notes = "; ".join(dict.fromkeys(str(d).splitlines()[0] for _, passed, d in entry["results"]
                                        if d and (ok or not passed)))
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {entry['title']}"
                      + (f" ({notes})" if notes else ""))
