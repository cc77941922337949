# checkpoint.py
"""
SSMD tensor container.

Layout: b"SSMD", u32 version, u64 header length, JSON header
{"tensors": [{"name", "shape", "count"}...], "meta": {...}}, then the
little-endian FP64 payloads in header order.
"""

import json
import logging
import os
import struct
from typing import Dict, Mapping, Tuple

import numpy as np

from errors import CheckpointError
from ssm_core import BufferMode, FusedBuffer, MambaParams

logger = logging.getLogger(__name__)

MAGIC = b"SSMD"
VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")

PARAM_ORDER = ("A_log", "delta_bias", "fused.W", "gate_weight")


# -----------------------------
# Container
# -----------------------------
def write_container(path: str, tensors: Mapping[str, np.ndarray], meta: Mapping = None) -> None:
    entries = []
    payloads = []
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f8"))
        entries.append({"name": name, "shape": list(arr.shape), "count": int(arr.size)})
        payloads.append(arr.tobytes())

    header = json.dumps({"tensors": entries, "meta": dict(meta or {})}, sort_keys=True).encode()

    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_PREAMBLE.pack(MAGIC, VERSION, len(header)))
        f.write(header)
        for payload in payloads:
            f.write(payload)


def read_container(path: str) -> Tuple[Dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError("path", f"cannot read {path}: {e}")

    if len(blob) < _PREAMBLE.size:
        raise CheckpointError("magic", "file too short for header")
    magic, version, header_len = _PREAMBLE.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError("magic", f"bad magic bytes {magic!r}")
    if version != VERSION:
        raise CheckpointError("version", f"unsupported version {version}")

    start = _PREAMBLE.size
    if len(blob) < start + header_len:
        raise CheckpointError("header", "unexpected end of header")
    try:
        header = json.loads(blob[start:start + header_len].decode())
        entries = header["tensors"]
    except (ValueError, KeyError, UnicodeDecodeError) as e:
        raise CheckpointError("header", f"unreadable header: {e}")

    tensors: Dict[str, np.ndarray] = {}
    offset = start + header_len
    for entry in entries:
        name = entry.get("name", "?")
        shape = tuple(int(s) for s in entry.get("shape", []))
        count = int(entry.get("count", -1))
        if int(np.prod(shape, dtype=np.int64)) != count:
            raise CheckpointError(name, "shape/payload mismatch")
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise CheckpointError(name, "unexpected end of tensor data")
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += nbytes

    if offset != len(blob):
        raise CheckpointError("payload", "shape/payload mismatch")
    return tensors, header.get("meta", {})


# -----------------------------
# MambaParams
# -----------------------------
def save_checkpoint(params: MambaParams, path: str) -> None:
    tensors = {
        "A_log": params.A_log,
        "delta_bias": params.delta_bias,
        "fused.W": params.fused.W,
        "gate_weight": params.gate_weight,
    }
    meta = {
        "kind": "mamba_params",
        "d": params.d,
        "T_max": params.T_max,
        "mode": params.mode.value,
        "gate_enabled": params.gate_enabled,
    }
    write_container(path, tensors, meta)
    logger.info("[CHECKPOINT] wrote %s", path)


def load_checkpoint(path: str) -> MambaParams:
    tensors, meta = read_container(path)
    if meta.get("kind") != "mamba_params":
        raise CheckpointError("meta.kind", f"expected mamba_params, got {meta.get('kind')!r}")
    for name in PARAM_ORDER:
        if name not in tensors:
            raise CheckpointError(name, "missing tensor")
    try:
        mode = BufferMode(meta["mode"])
        T_max = int(meta["T_max"])
    except (KeyError, ValueError) as e:
        raise CheckpointError("meta", f"invalid metadata: {e}")
    try:
        return MambaParams(
            A_log=tensors["A_log"],
            fused=FusedBuffer(mode, tensors["fused.W"]),
            delta_bias=tensors["delta_bias"],
            T_max=T_max,
            gate_enabled=bool(meta.get("gate_enabled", False)),
            gate_weight=tensors["gate_weight"],
        )
    except Exception as e:
        raise CheckpointError("shape", str(e))
