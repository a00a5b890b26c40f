"""Checkpoint container.

Layout (all integers little-endian)::

    4 bytes   magic  b"EQCK"
    u16       format version
    u32       header length H
    H bytes   UTF-8 JSON header: {"version", "meta", "tensors": [
                  {"name", "shape", "offset", "count"}, ...]}
    payload   float64 little-endian values, tensors back to back

Tensor names are ``<network>/<tensor>``; Adam moments live under
``<network>/adam.m/<tensor>`` and ``<network>/adam.v/<tensor>`` and the
Adam step counter in the header's ``meta["adam_steps"][<network>]``.
Writes go to a temporary file and are renamed into place, so a reader
never observes a partial checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"EQCK"
FORMAT_VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f8"))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": arr.size})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps(
        {"version": FORMAT_VERSION, "meta": meta or {}, "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    blob = MAGIC + struct.pack("<HI", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return path


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[10 : 10 + hlen].decode("utf-8"))
    payload = np.frombuffer(raw[10 + hlen :], dtype="<f8")
    tensors = {}
    for e in header["tensors"]:
        start = e["offset"]
        tensors[e["name"]] = payload[start : start + e["count"]].reshape(e["shape"]).astype(np.float64)
    return tensors, header["meta"]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def pack_network(name: str, module, params=None) -> dict[str, np.ndarray]:
    """Flatten one module (and optionally its ParameterSet moments) into named tensors."""
    out = {f"{name}/{k}": v for k, v in module.state_dict().items()}
    if params is not None:
        for pname, m, v in zip(params.names, params.first_moment, params.second_moment):
            out[f"{name}/adam.m/{pname}"] = m
            out[f"{name}/adam.v/{pname}"] = v
    return out


def unpack_network(name: str, tensors: dict[str, np.ndarray], module, params=None) -> None:
    prefix = f"{name}/"
    state = {
        k[len(prefix) :]: v
        for k, v in tensors.items()
        if k.startswith(prefix) and "/adam." not in k
    }
    module.load_state_dict(state)
    if params is not None:
        for i, pname in enumerate(params.names):
            m_key, v_key = f"{name}/adam.m/{pname}", f"{name}/adam.v/{pname}"
            if m_key in tensors:
                params.first_moment[i] = tensors[m_key].copy()
                params.second_moment[i] = tensors[v_key].copy()
