"""CSV and JSON helpers shared by the driver and the command line."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

__all__ = ["write_csv", "read_csv", "write_json", "read_json", "save_params", "load_params"]


def _fmt(v):
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)  # shortest round-tripping form
    return v


def write_csv(path, rows, columns) -> Path:
    """Write dict rows with a fixed column order; floats round-trip exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="raise")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in columns})
    return path


def _parse(text: str):
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_csv(path) -> tuple[list[str], list[dict]]:
    """Read a CSV written by :func:`write_csv`, converting numbers back."""
    with Path(path).open(newline="") as fh:
        r = csv.DictReader(fh)
        rows = [{k: _parse(v) for k, v in row.items()} for row in r]
        return list(r.fieldnames or []), rows


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def save_params(path, params) -> Path:
    """Store model parameters and their config in one ``.npz`` file."""
    from dataclasses import asdict

    arrays = {}
    for i, lp in enumerate(params.layers):
        for name in ("w_q", "w_k", "w_v", "w_o", "w1", "w2",
                     "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta"):
            arrays[f"{i}.{name}"] = getattr(lp, name)
        arrays[f"{i}.ln_eps"] = np.asarray(lp.ln_eps)
    arrays["config"] = np.asarray(json.dumps(asdict(params.config)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_params(path):
    from .model import LayerParams, ModelConfig, Params

    with np.load(Path(path)) as data:
        cfg = ModelConfig(**json.loads(str(data["config"])))
        layers = []
        for i in range(cfg.depth):
            kw = {n: data[f"{i}.{n}"].copy() for n in (
                "w_q", "w_k", "w_v", "w_o", "w1", "w2",
                "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta")}
            layers.append(LayerParams(**kw, ln_eps=[float(e) for e in data[f"{i}.ln_eps"]]))
    return Params(cfg, layers)
