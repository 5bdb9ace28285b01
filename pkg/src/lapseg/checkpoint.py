"""Versioned binary checkpoints.

Layout: ``b"LPCK" | u32 version | u64 header_len | header JSON | payload``.
The header (sorted-key JSON) carries the model config, epoch counter, RNG
state and a name-indexed tensor directory (shape, dtype, byte offset) for
parameters and optimizer velocities; the payload is the raw little-endian
tensor bytes in directory order. Serialisation is fully deterministic, so
save -> load -> save produces identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, Segmenter
from .tensor import Tensor

MAGIC = b"LPCK"
VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict              # name -> ndarray
    velocities: dict | None   # name -> ndarray, same key set as params
    epoch: int
    rng_state: dict | None


def _directory(tensors: dict) -> tuple[list, int]:
    entries = []
    offset = 0
    for name, arr in tensors.items():
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        nbytes = arr.size * arr.itemsize
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": dtype,
            "offset": offset,
        })
        offset += nbytes
    return entries, offset


def save_checkpoint(path, config: ModelConfig, params: dict,
                    velocities: dict | None = None, epoch: int = 0,
                    rng_state: dict | None = None):
    """Write a checkpoint; ``params``/``velocities`` map names to arrays."""
    param_arrays = {k: np.ascontiguousarray(v.data if isinstance(v, Tensor) else v)
                    for k, v in params.items()}
    vel_arrays = None
    if velocities is not None:
        if set(velocities) != set(param_arrays):
            raise CheckpointError("velocity names do not match parameter names")
        vel_arrays = {k: np.ascontiguousarray(v) for k, v in velocities.items()}

    p_dir, p_size = _directory(param_arrays)
    header = {
        "config": config.to_dict(),
        "epoch": int(epoch),
        "rng_state": rng_state,
        "params": p_dir,
        "velocities": None,
    }
    if vel_arrays is not None:
        v_dir, _ = _directory(vel_arrays)
        for entry in v_dir:
            entry["offset"] += p_size
        header["velocities"] = v_dir

    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, arr in param_arrays.items():
            fh.write(arr.astype(_DTYPES[str(arr.dtype)], copy=False).tobytes())
        if vel_arrays is not None:
            for name, arr in vel_arrays.items():
                fh.write(arr.astype(_DTYPES[str(arr.dtype)], copy=False).tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    try:
        header = json.loads(raw[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    payload = raw[16 + hlen:]

    def read_dir(entries):
        out = {}
        for e in entries:
            dt = np.dtype(_DTYPES[e["dtype"]])
            count = int(np.prod(e["shape"])) if e["shape"] else 1
            start = e["offset"]
            end = start + count * dt.itemsize
            if end > len(payload):
                raise CheckpointError(f"{path}: truncated payload at {e['name']}")
            arr = np.frombuffer(payload[start:end], dtype=dt).reshape(e["shape"])
            out[e["name"]] = arr.astype(e["dtype"])
        return out

    params = read_dir(header["params"])
    velocities = read_dir(header["velocities"]) if header["velocities"] else None
    config = ModelConfig.from_dict(header["config"])
    return Checkpoint(config=config, params=params, velocities=velocities,
                      epoch=header["epoch"], rng_state=header["rng_state"])


def restore_into(model: Segmenter, params: dict):
    """Copy a name-indexed parameter dict into a built model.

    Raises CheckpointError naming the first parameter whose shape differs,
    and on missing or unexpected names.
    """
    model_params = dict(model.named_parameters())
    missing = sorted(set(model_params) - set(params))
    extra = sorted(set(params) - set(model_params))
    if missing:
        raise CheckpointError(f"checkpoint lacks parameter {missing[0]!r}")
    if extra:
        raise CheckpointError(f"checkpoint has unexpected parameter {extra[0]!r}")
    for name, tensor in model_params.items():
        arr = params[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {tuple(arr.shape)} "
                f"vs model {tuple(tensor.shape)}"
            )
        tensor.data = np.ascontiguousarray(arr, dtype=tensor.dtype)


def build_model(ck: Checkpoint) -> Segmenter:
    """Construct a model from a checkpoint's config and load its weights."""
    model = Segmenter(ck.config, np.random.default_rng(0))
    restore_into(model, ck.params)
    return model
