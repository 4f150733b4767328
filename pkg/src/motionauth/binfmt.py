"""Container format: JSON header followed by a raw little-endian array payload.

Layout::

    b"MAUTH\\x00\\x00\\x01"            8-byte magic
    uint32 little-endian            header length in bytes
    UTF-8 JSON header               {"format_version", "tensors": [...], "payload_sha256", ...}
    payload                         arrays in manifest order, row-major, little-endian

The same framing backs parameter files, model files and window caches.
"""

import hashlib
import json
import os
import struct

import numpy as np

from .errors import CorruptModelFile, IncompatibleModelFile

MAGIC = b"MAUTH\x00\x00\x01"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def encode(header, arrays):
    """Serialize ``arrays`` (sequence of (name, ndarray)) under ``header``."""
    manifest = []
    chunks = []
    for name, arr in arrays:
        arr = np.asarray(arr)
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {dtype} for {name}")
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
    payload = b"".join(chunks)
    full = dict(header)
    full.setdefault("format_version", FORMAT_VERSION)
    full["tensors"] = manifest
    full["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    head = json.dumps(full, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + payload


def decode(blob, max_version=FORMAT_VERSION):
    """Inverse of :func:`encode`; returns ``(header, {name: ndarray})``."""
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise CorruptModelFile("bad magic or truncated header")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + hlen:
        raise CorruptModelFile("truncated header")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptModelFile(f"unreadable header: {exc}") from None
    version = header.get("format_version")
    if not isinstance(version, int):
        raise CorruptModelFile("missing format_version")
    if version > max_version:
        raise IncompatibleModelFile(
            f"format_version {version} is newer than supported {max_version}")
    payload = blob[12 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CorruptModelFile("payload checksum mismatch (truncated or modified)")
    arrays = {}
    pos = 0
    for entry in header.get("tensors", []):
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if pos + nbytes > len(payload):
            raise CorruptModelFile(f"payload too short for {entry['name']}")
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=pos)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
        pos += nbytes
    if pos != len(payload):
        raise CorruptModelFile("trailing bytes after payload")
    return header, arrays


def write_file(path, header, arrays):
    blob = encode(header, arrays)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_file(path, max_version=FORMAT_VERSION):
    with open(path, "rb") as fh:
        return decode(fh.read(), max_version=max_version)
