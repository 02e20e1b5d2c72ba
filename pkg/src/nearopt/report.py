"""Deterministic JSON reports named by a hash of the run configuration."""
from __future__ import annotations

import hashlib
import json
import math
import os

import numpy as np

__all__ = ["to_jsonable", "dumps", "config_hash", "write_report"]


def to_jsonable(v):
    if isinstance(v, dict):
        return {str(k): to_jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [to_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return to_jsonable(v.tolist())
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isfinite(v):
            return v
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if hasattr(v, "to_dict"):
        return to_jsonable(v.to_dict())
    return v


def dumps(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def config_hash(config: dict) -> str:
    blob = json.dumps(to_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def write_report(command: str, config: dict, result: dict, out_dir) -> str:
    """Write ``<command>-<hash>.json`` into ``out_dir``; same inputs give the same bytes."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{command}-{config_hash(config)}.json")
    text = dumps({"command": command, "config": config, "result": result})
    with open(path, "w") as fh:
        fh.write(text)
    return path
