"""Binary tensor container used for checkpoints and weight files.

Layout (all integers little-endian):

    bytes 0..3    magic ``b"TSIC"``
    bytes 4..7    container version, uint32 (currently 1)
    bytes 8..15   header length N, uint64
    bytes 16..16+N UTF-8 JSON header
    remainder     raw tensor payload

The JSON header has two keys:

    ``meta``     arbitrary JSON metadata supplied by the caller
    ``tensors``  name -> {"dtype", "shape", "offset", "nbytes"}

Tensor data is stored little-endian, C-contiguous, concatenated in sorted
name order so that writing the same content twice produces byte-identical
files. ``dtype`` uses numpy codes ("f4", "f8", "i8", "u1", ...).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"TSIC"
CONTAINER_VERSION = 1

_HEADER_FIXED = 16  # magic + version + header length


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus JSON metadata to ``path``.

    Names are sorted before layout, so the output is deterministic for a
    given (tensors, meta) content.
    """
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if not arr.flags["C_CONTIGUOUS"]:
            # note: np.ascontiguousarray would promote 0-d arrays to 1-d,
            # but 0-d arrays are always contiguous and never reach this
            arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries[name] = {
            "dtype": le.dtype.str.lstrip("<|="),
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        blobs.append(raw)
        offset += len(raw)

    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", CONTAINER_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container written by :func:`save_tensors`.

    Returns ``(tensors, meta)``. Raises :class:`CheckpointError` on a bad
    magic, an unsupported version, or a truncated file; no partial state is
    returned.
    """
    with open(path, "rb") as fh:
        data = fh.read()

    if len(data) < _HEADER_FIXED or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a tensor container (bad magic)")
    version = int(np.frombuffer(data[4:8], dtype="<u4")[0])
    if version != CONTAINER_VERSION:
        raise CheckpointError(
            f"{path}: container version {version} unsupported (expected {CONTAINER_VERSION})"
        )
    header_len = int(np.frombuffer(data[8:16], dtype="<u8")[0])
    if len(data) < _HEADER_FIXED + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[_HEADER_FIXED:_HEADER_FIXED + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc

    payload = data[_HEADER_FIXED + header_len:]
    tensors = {}
    for name, info in header["tensors"].items():
        start, nbytes = info["offset"], info["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated payload for tensor '{name}'")
        arr = np.frombuffer(payload[start:start + nbytes], dtype="<" + info["dtype"])
        tensors[name] = arr.reshape(info["shape"]).astype(arr.dtype.newbyteorder("="))
    return tensors, header["meta"]
