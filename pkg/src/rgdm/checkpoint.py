"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"RGDM"                  magic, 4 bytes
    u32                      format version (1)
    u64                      metadata length in bytes
    utf-8 JSON               metadata
    u64                      parameter count
    f64 * count              parameters, canonical flat order (see ``rgdm.net``)
    f64 * count, f64 * count Adam first/second moments, only if
                             metadata["has_optimizer"] is true
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .net import NoiseEstimator, param_count
from .schedule import NoiseSchedule, schedule_from_spec

MAGIC = b"RGDM"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "OptimizerState":
        return cls(np.zeros(n), np.zeros(n), 0)


@dataclass
class Checkpoint:
    schedule: dict
    layer_dims: list[int]
    params: np.ndarray
    optimizer: OptimizerState | None = None
    meta: dict = field(default_factory=dict)
    context: str = "time"

    def estimator(self) -> NoiseEstimator:
        return NoiseEstimator(list(self.layer_dims), self.params.copy(), self.context)

    def noise_schedule(self) -> NoiseSchedule:
        return schedule_from_spec(self.schedule)

    def metadata(self) -> dict:
        out = dict(self.meta)
        out.update(
            schedule=self.schedule,
            layer_dims=list(self.layer_dims),
            context=self.context,
            has_optimizer=self.optimizer is not None,
            optimizer_step=0 if self.optimizer is None else int(self.optimizer.step),
        )
        return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = json.dumps(ckpt.metadata(), sort_keys=True).encode("utf-8")
    params = np.ascontiguousarray(ckpt.params, dtype="<f8")
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(meta)), meta]
    chunks += [struct.pack("<Q", params.size), params.tobytes()]
    if ckpt.optimizer is not None:
        chunks += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in (ckpt.optimizer.m, ckpt.optimizer.v)]
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    try:
        (version,) = struct.unpack_from("<I", raw, 4)
        (mlen,) = struct.unpack_from("<Q", raw, 8)
        meta = json.loads(raw[16 : 16 + mlen].decode("utf-8"))
        pos = 16 + mlen
        (count,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt header ({exc})") from exc
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    n_arrays = 3 if meta.get("has_optimizer") else 1
    if len(raw) != pos + 8 * count * n_arrays:
        raise CheckpointError(f"{path}: expected {pos + 8 * count * n_arrays} bytes, found {len(raw)}")
    arrays = [
        np.frombuffer(raw, dtype="<f8", count=count, offset=pos + 8 * count * k).astype(np.float64)
        for k in range(n_arrays)
    ]
    try:
        layer_dims = [int(d) for d in meta.pop("layer_dims")]
        context = meta.pop("context")
        schedule = meta.pop("schedule")
        has_opt = meta.pop("has_optimizer")
        opt_step = int(meta.pop("optimizer_step"))
    except KeyError as exc:
        raise CheckpointError(f"{path}: metadata lacks {exc}") from exc
    try:
        expected = param_count(layer_dims, context)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    if expected != count:
        raise CheckpointError(f"{path}: {count} parameters do not fit topology {layer_dims} ({context})")
    opt = OptimizerState(arrays[1], arrays[2], opt_step) if has_opt else None
    return Checkpoint(schedule, layer_dims, arrays[0], opt, meta, context)
