"""Versioned flat checkpoint container with bit-exact round trips.

Layout: magic, u32 header length, JSON header (version, metadata, array
manifest), then the raw little-endian buffers in manifest order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"NACKPT01"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    params: dict[str, np.ndarray] = field(default_factory=dict)
    state: dict[str, np.ndarray] = field(default_factory=dict)
    ema: dict[str, np.ndarray] = field(default_factory=dict)


def _manifest(group: dict[str, np.ndarray]) -> list:
    return [[name, list(arr.shape), arr.dtype.name] for name, arr in group.items()]


def save_checkpoint(path, net=None, meta: dict | None = None,
                    params: dict[str, np.ndarray] | None = None,
                    state: dict[str, np.ndarray] | None = None,
                    ema: dict[str, np.ndarray] | None = None) -> None:
    """Write a checkpoint from a net and/or explicit array groups."""
    params = dict(params or {})
    state = dict(state or {})
    if net is not None:
        for name, p in net.named_params():
            params.setdefault(name, p.data)
        for name, a in net.named_state():
            state.setdefault(name, a)
    groups = {"params": params, "state": state, "ema": dict(ema or {})}
    header = {
        "version": VERSION,
        "meta": meta or {},
        "manifest": {g: _manifest(arrs) for g, arrs in groups.items()},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arrs in groups.values():
            for arr in arrs.values():
                fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[len(MAGIC) : len(MAGIC) + 4])
    pos = len(MAGIC) + 4
    header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    pos += hlen
    out = Checkpoint(meta=header["meta"])
    for gname, target in (("params", out.params), ("state", out.state), ("ema", out.ema)):
        for name, shape, dtype in header["manifest"].get(gname, []):
            n = int(np.prod(shape)) if shape else 1
            nbytes = n * np.dtype(dtype).itemsize
            arr = np.frombuffer(data[pos : pos + nbytes], dtype=dtype).reshape(shape)
            target[name] = arr.copy()
            pos += nbytes
    return out


def restore(net, ckpt: Checkpoint, params: bool = True, state: bool = True) -> None:
    """Load checkpoint arrays into a net; shapes must match exactly."""
    if params:
        for name, p in net.named_params():
            if name not in ckpt.params:
                raise CheckpointError(f"checkpoint missing parameter {name!r}")
            p.assign(ckpt.params[name])
    if state:
        for name, _ in net.named_state():
            if name in ckpt.state:
                net.set_state(name, ckpt.state[name])


def params_digest(net) -> str:
    """Order-stable hash of all parameter bytes (freeze/determinism checks)."""
    import hashlib

    h = hashlib.sha256()
    for name, p in net.named_params():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
