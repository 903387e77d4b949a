"""Checkpoints: flat little-endian float64 arrays plus a JSON sidecar."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .ema import EmaState
from .model import MLPSpec, ParameterVector

_LE_F64 = np.dtype("<f8")


def save_checkpoint(
    directory, params: ParameterVector, ema: EmaState | None = None, config_hash: str = ""
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params.values.astype(_LE_F64).tofile(directory / "params.bin")
    meta = {
        "format": 1,
        "data_dim": params.spec.data_dim,
        "hidden": params.spec.hidden,
        "n_params": params.spec.n_params,
        "shapes": {k: list(v) for k, v in params.spec.shapes.items()},
        "config_hash": config_hash,
        "ema": None,
    }
    if ema is not None:
        ema.shadow.astype(_LE_F64).tofile(directory / "ema.bin")
        meta["ema"] = {"decay": ema.decay, "updates_seen": ema.updates_seen}
        if ema.total is not None:
            ema.total.astype(_LE_F64).tofile(directory / "ema_total.bin")
    (directory / "checkpoint.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> tuple[ParameterVector, EmaState | None, dict]:
    directory = Path(directory)
    meta = json.loads((directory / "checkpoint.json").read_text())
    spec = MLPSpec(meta["data_dim"], meta["hidden"])
    values = np.fromfile(directory / "params.bin", dtype=_LE_F64).astype(np.float64)
    params = ParameterVector(values, spec)
    ema = None
    if meta.get("ema") is not None:
        shadow = np.fromfile(directory / "ema.bin", dtype=_LE_F64).astype(np.float64)
        total = None
        if (directory / "ema_total.bin").exists():
            total = np.fromfile(directory / "ema_total.bin", dtype=_LE_F64).astype(np.float64)
        ema = EmaState(shadow, meta["ema"]["decay"], meta["ema"]["updates_seen"], total)
    return params, ema, meta
