"""Single-file model checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic  b"MORECKPT"
    u32       format version (1)
    u64       header length H in bytes
    H bytes   UTF-8 JSON header:
                {"spec": {...ModelSpec...},
                 "dtype": "<f4",
                 "tensors": [{"name", "shape", "offset", "nbytes"}, ...],
                 "meta": {...}}
    ...       tensor blobs; ``offset`` counts from the first byte after the header

Blobs are raw little-endian float32 by default. Loading widens to float64.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .models import ModelSpec, Params, SpecError, _is_buffer, validate_params
from .tensor import Tensor

MAGIC = b"MORECKPT"
VERSION = 1
DTYPES = ("<f4", "<f8")


class CheckpointError(ValueError):
    pass


def dumps(spec: ModelSpec, params: Params, meta: dict | None = None, dtype: str = "<f4") -> bytes:
    if dtype not in DTYPES:
        raise CheckpointError(f"dtype must be one of {DTYPES}")
    index, blobs, offset = [], [], 0
    for name in sorted(params):
        raw = np.ascontiguousarray(params[name].value, dtype=dtype).tobytes()
        index.append({"name": name, "shape": list(params[name].shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"spec": spec.to_dict(), "dtype": dtype, "tensors": index, "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<IQ", VERSION, len(header)), header, *blobs])


def loads(buf: bytes) -> tuple[ModelSpec, Params, dict]:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a moretool checkpoint (bad magic)")
    if len(buf) < 20:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack_from("<IQ", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 8 + 12
    try:
        header = json.loads(bytes(buf[start : start + hlen]).decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        dtype, entries = header["dtype"], header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header ({exc})") from exc
    if dtype not in DTYPES:
        raise CheckpointError(f"unsupported blob dtype {dtype}")
    body = memoryview(buf)[start + hlen :]
    params: Params = {}
    for entry in entries:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(body):
            raise CheckpointError(f"tensor {entry['name']} runs past end of file")
        try:
            value = np.frombuffer(body[lo:hi], dtype=dtype).astype(np.float64).reshape(entry["shape"])
        except ValueError as exc:
            raise CheckpointError(f"tensor {entry['name']}: {exc}") from exc
        params[entry["name"]] = Tensor(value, requires_grad=not _is_buffer(entry["name"]), name=entry["name"])
    try:
        validate_params(spec, params)
    except SpecError as exc:
        raise CheckpointError(str(exc)) from exc
    return spec, params, header.get("meta", {})


def save(path, spec: ModelSpec, params: Params, meta: dict | None = None, dtype: str = "<f4") -> Path:
    path = Path(path)
    path.write_bytes(dumps(spec, params, meta, dtype))
    return path


def load(path) -> tuple[ModelSpec, Params, dict]:
    path = Path(path)
    try:
        return loads(path.read_bytes())
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
