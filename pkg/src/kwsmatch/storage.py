"""Binary container shared by corpus, audio and checkpoint files.

Layout (all integers little-endian)::

    magic      8 bytes      e.g. b"KWSCORP\\0", b"KWSCKPT\\0", b"KWSAUDI\\0"
    version    uint32
    hlen       uint64       byte length of the JSON header
    header     hlen bytes   UTF-8 JSON: {"meta": {...}, "arrays": [entry, ...]}
    payload    raw array bytes, C order, little-endian

Each array entry is {"name", "dtype", "shape", "offset", "nbytes"} with the
offset relative to the start of the payload.  The header is serialised with
sorted keys so identical inputs give byte-identical files.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class FormatError(ValueError):
    """Bad magic, unsupported version, or a truncated/corrupt file."""


def write_container(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]):
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: file too short for a container header")
    got_magic, version, hlen = _PREFIX.unpack_from(raw)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    payload = memoryview(raw)[start + hlen:]
    arrays = {}
    for e in header["arrays"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise FormatError(f"{path}: array {e['name']!r} truncated")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return header["meta"], arrays
