"""Single-file checkpoint container.

Layout: ``b"EGCK"``, u32 version, u32 header length, UTF-8 JSON header, then
every tensor as little-endian float32 in header order. The header records
the config hash; loading against a different hash raises.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigHashMismatchError, DataError, MissingFileError, VersionMismatchError

MAGIC = b"EGCK"
VERSION = 1


def _flatten_optimizer(opt_state):
    tensors, meta = {}, {"param_groups": opt_state.get("param_groups", []), "state": {}}
    for pid, entries in opt_state.get("state", {}).items():
        meta["state"][str(pid)] = {}
        for key, value in entries.items():
            if torch.is_tensor(value):
                name = f"optim/{pid}/{key}"
                tensors[name] = value
                meta["state"][str(pid)][key] = {"tensor": name}
            else:
                meta["state"][str(pid)][key] = {"value": value}
    return tensors, meta


def _unflatten_optimizer(meta, tensors):
    state = {}
    for pid, entries in meta["state"].items():
        state[int(pid)] = {k: tensors[v["tensor"]] if "tensor" in v else v["value"] for k, v in entries.items()}
    return {"state": state, "param_groups": meta["param_groups"]}


def save_checkpoint(path, model_state, optimizer_state=None, config=None, config_hash="", extra=None):
    tensors = dict(model_state)
    opt_tensors, opt_meta = _flatten_optimizer(optimizer_state or {})
    tensors.update(opt_tensors)
    index, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4") if torch.is_tensor(t) else np.asarray(t, "<f4")
        blobs.append(arr.tobytes())
        index.append({"name": name, "shape": list(arr.shape), "offset": offset,
                      "optim": name.startswith("optim/") and name in opt_tensors})
        offset += arr.nbytes
    header = json.dumps({
        "config_hash": config_hash,
        "config": config or {},
        "tensors": index,
        "optimizer": opt_meta if optimizer_state else None,
        "extra": extra or {},
    }).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<II", VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    return path


def load_checkpoint(path, expected_hash=None):
    """Returns a dict with ``model``, ``optimizer``, ``config``, ``config_hash`` and ``extra``."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(path, "checkpoint")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise VersionMismatchError(f"{path}: bad magic {data[:4]!r}")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise VersionMismatchError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: corrupt header") from e
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise ConfigHashMismatchError(
            f"{path}: checkpoint config hash {header['config_hash']} != expected {expected_hash}")
    base = 12 + hlen
    model, opt_tensors = {}, {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=base + entry["offset"])
        t = torch.from_numpy(arr.reshape(entry["shape"]).copy())
        (opt_tensors if entry["optim"] else model)[entry["name"]] = t
    optimizer = _unflatten_optimizer(header["optimizer"], opt_tensors) if header["optimizer"] else None
    return {"model": model, "optimizer": optimizer, "config": header["config"],
            "config_hash": header["config_hash"], "extra": header["extra"]}
