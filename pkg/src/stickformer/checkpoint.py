"""Versioned checkpoint container: text header plus raw float64 payloads.

Layout:
    line 1: ``STICKFORMER-CKPT <version>``
    line 2: header byte length (decimal)
    header: JSON with iteration, optimizer step count, the resolved config,
            and an array table of {name, shape, offset} entries
    payload: concatenated little-endian float64 array bodies

Round-tripping is bit-exact: arrays are written and read as raw bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = "STICKFORMER-CKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray],
                    config_dict: dict, iteration: int, step_count: int) -> None:
    table = []
    offset = 0
    bodies = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype=np.float64)  # keeps 0-d shapes
        body = arr.astype("<f8", copy=False).tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        bodies.append(body)
        offset += len(body)
    header = json.dumps({
        "iteration": int(iteration),
        "step_count": int(step_count),
        "config": config_dict,
        "arrays": table,
    }, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"{MAGIC} {VERSION}\n".encode())
        f.write(f"{len(header)}\n".encode())
        f.write(header)
        for body in bodies:
            f.write(body)


def load_checkpoint(path: str | Path) -> dict:
    """Returns {"arrays", "config", "iteration", "step_count"}."""
    with open(path, "rb") as f:
        magic = f.readline().decode().strip()
        if not magic.startswith(MAGIC):
            raise CheckpointError(f"{path}: not a checkpoint file")
        version = int(magic.split()[-1])
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        header_len = int(f.readline().decode().strip())
        header = json.loads(f.read(header_len).decode())
        payload = f.read()
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return {
        "arrays": arrays,
        "config": header["config"],
        "iteration": header["iteration"],
        "step_count": header["step_count"],
    }


def optimizer_arrays(optimizer) -> dict[str, np.ndarray]:
    """Flatten AdamW state into checkpoint-ready named arrays."""
    out = {}
    for name, arr in optimizer.m.items():
        out[f"opt.m.{name}"] = arr
    for name, arr in optimizer.v.items():
        out[f"opt.v.{name}"] = arr
    return out


def split_arrays(arrays: dict[str, np.ndarray]):
    """Separate model parameters from optimizer moment arrays."""
    params = {}
    m = {}
    v = {}
    for name, arr in arrays.items():
        if name.startswith("opt.m."):
            m[name[len("opt.m."):]] = arr
        elif name.startswith("opt.v."):
            v[name[len("opt.v."):]] = arr
        else:
            params[name] = arr
    return params, m, v
