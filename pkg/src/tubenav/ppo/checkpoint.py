"""Self-describing checkpoint container (.npz with an embedded JSON header)."""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any

import numpy as np

from ..env import OBS_DIM, layout_hash
from .network import Adam, PolicyParams, RunningNorm

FORMAT = "tubenav-policy"
VERSION = 1


def save_checkpoint(path: str | Path, params: PolicyParams, meta: dict[str, Any] | None = None,
                    opt: Adam | None = None) -> Path:
    """Write atomically: a crash mid-write never clobbers the previous file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "dims": list(params.dims),
        "obs_layout_hash": layout_hash(),
        "weights": sorted(params.weights),
        "norm_count": params.obs_norm.count,
        "ret_norm_count": params.ret_norm.count,
        "adam_t": opt.t if opt is not None else 0,
    }
    header.update(meta or {})
    arrays = {f"w/{k}": v.astype(np.float64) for k, v in params.weights.items()}
    arrays["norm/mean"] = params.obs_norm.mean
    arrays["norm/var"] = params.obs_norm.var
    arrays["ret/mean"] = params.ret_norm.mean
    arrays["ret/var"] = params.ret_norm.var
    if opt is not None:
        arrays.update(opt.state_arrays())
    arrays["header"] = np.array(json.dumps(header))
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path, opt: Adam | None = None) -> tuple[PolicyParams, dict[str, Any]]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != FORMAT:
            raise ValueError(f"{path} is not a policy checkpoint")
        if header["version"] > VERSION:
            raise ValueError(f"checkpoint version {header['version']} is newer than supported")
        if header["dims"][0] == OBS_DIM and header.get("obs_layout_hash") != layout_hash():
            raise ValueError("checkpoint was trained with a different observation layout")
        weights = {k: np.array(data[f"w/{k}"]) for k in header["weights"]}
        obs_norm = RunningNorm(np.array(data["norm/mean"]), np.array(data["norm/var"]),
                               float(header["norm_count"]))
        ret_norm = RunningNorm(np.array(data["ret/mean"]), np.array(data["ret/var"]),
                               float(header["ret_norm_count"]))
        if opt is not None:
            opt.load_arrays({k: data[k] for k in data.files if k.startswith("adam_")},
                            int(header["adam_t"]))
    params = PolicyParams(weights, obs_norm, ret_norm)
    if not params.is_finite():
        raise ValueError("checkpoint contains non-finite weights")
    return params, header
