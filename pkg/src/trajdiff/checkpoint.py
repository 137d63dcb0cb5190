"""Binary model checkpoints.

Layout: 5-byte magic ``TDCK1``, uint32 little-endian header length, a UTF-8
JSON header (schema version, model config, schedule parameters, normalization
stats, grid spec, training step count, seed, and a parameter table with name,
shape, offset and byte size), then the payload of concatenated little-endian
float32 arrays. Reloading reproduces parameters bit-exactly.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import DataError
from .schedule import NoiseSchedule, linear_beta_schedule
from .tensor import Tensor
from .trajdata import GridSpec, NormStats
from .unet import TrajUNet, TrajUNetConfig

MAGIC = b"TDCK1"
SCHEMA_VERSION = 1


def save_checkpoint(path, model: TrajUNet, sched: NoiseSchedule, norm: NormStats,
                    grid: GridSpec, train_steps: int, seed: int) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(p.data.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "schema_version": SCHEMA_VERSION,
        "config": model.config.to_dict(),
        "schedule": {"T": sched.T, "beta_start": sched.beta_start, "beta_end": sched.beta_end},
        "norm": norm.to_dict(),
        "grid": grid.to_dict(),
        "train_steps": int(train_steps),
        "seed": int(seed),
        "params": entries,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(head).to_bytes(4, "little"))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[TrajUNet, NoiseSchedule, NormStats, GridSpec, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4 or blob[:len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    head_len = int.from_bytes(blob[5:9], "little")
    head_end = 9 + head_len
    if head_end > len(blob):
        raise DataError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(blob[9:head_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: corrupt checkpoint header: {e}") from e
    if header.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported checkpoint schema version "
                        f"{header.get('schema_version')!r} (expected {SCHEMA_VERSION})")

    payload = blob[head_end:]
    params: dict[str, Tensor] = {}
    for e in header["params"]:
        lo, hi = e["offset"], e["offset"] + e["nbytes"]
        if hi > len(payload):
            raise DataError(f"{path}: truncated payload for parameter {e['name']!r}")
        arr = np.frombuffer(payload[lo:hi], dtype="<f4").reshape(e["shape"]).copy()
        params[e["name"]] = Tensor(arr, requires_grad=True)

    config = TrajUNetConfig.from_dict(header["config"])
    model = TrajUNet(config, params=params)
    s = header["schedule"]
    sched = linear_beta_schedule(s["T"], s["beta_start"], s["beta_end"])
    norm = NormStats.from_dict(header["norm"])
    grid = GridSpec.from_dict(header["grid"])
    return model, sched, norm, grid, header
