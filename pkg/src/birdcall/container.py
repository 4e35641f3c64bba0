"""A deterministic binary container for named arrays plus JSON metadata.

Model files and segment caches share this format. The layout is
magic | header length (uint64 LE) | JSON header | raw tensor payload,
where the header lists every tensor's name, dtype, shape, and offset and
carries a SHA-256 of the payload. Writing the same arrays and metadata
always produces identical bytes, which keeps end-to-end runs comparable
file-for-file.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"BCARRAY1"

_ALLOWED_DTYPES = {"float64", "float32", "int64", "int32", "uint8", "bool"}


class ContainerError(ValueError):
    """The file is not a valid container (bad magic, version, or checksum)."""


def write_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.name
        if dtype not in _ALLOWED_DTYPES:
            raise ValueError(f"refusing to serialize dtype {dtype} for {name!r}")
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "version": 1,
        "meta": meta,
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise ContainerError("not a recognized array container")
    (header_len,) = struct.unpack_from("<Q", data, len(MAGIC))
    header_start = len(MAGIC) + 8
    header_end = header_start + header_len
    if len(data) < header_end:
        raise ContainerError("container header is truncated")
    try:
        header = json.loads(data[header_start:header_end])
    except json.JSONDecodeError as exc:
        raise ContainerError(f"container header is corrupted: {exc}") from exc
    if header.get("version") != 1:
        raise ContainerError(f"unsupported container version {header.get('version')!r}")

    payload = data[header_end:]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header.get("payload_sha256"):
        raise ContainerError("payload checksum mismatch (file truncated or corrupted)")

    arrays = {}
    for entry in header["tensors"]:
        dtype = entry["dtype"]
        if dtype not in _ALLOWED_DTYPES:
            raise ContainerError(f"unexpected dtype {dtype!r} in container")
        start, nbytes = entry["offset"], entry["nbytes"]
        raw = payload[start : start + nbytes]
        if len(raw) != nbytes:
            raise ContainerError(f"tensor {entry['name']!r} extends past the payload")
        arr = np.frombuffer(raw, dtype=np.dtype(dtype)).reshape(entry["shape"]).copy()
        arrays[entry["name"]] = arr
    return header["meta"], arrays
