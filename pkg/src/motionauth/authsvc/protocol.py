"""Length-prefixed JSON frames: 4-byte big-endian size, then a UTF-8 JSON body."""

import base64
import json
import struct

import numpy as np

from ..errors import ProtocolError

MAX_FRAME = 1 << 20
_HEADER = struct.Struct(">I")


class FrameTooLarge(ProtocolError):
    code = "frame_too_large"


def encode_frame(obj, max_frame=MAX_FRAME):
    body = json.dumps(obj, separators=(",", ":")).encode("utf-8")
    if len(body) > max_frame:
        raise FrameTooLarge(f"frame of {len(body)} bytes exceeds {max_frame}")
    return _HEADER.pack(len(body)) + body


def _read_exact(rfile, n):
    buf = rfile.read(n)
    if buf is None or len(buf) < n:
        raise EOFError("connection closed mid-frame" if buf else "connection closed")
    return buf


def read_frame_bytes(rfile, max_frame=MAX_FRAME):
    """Raw body of the next frame; ``FrameTooLarge`` before reading an oversize body."""
    (size,) = _HEADER.unpack(_read_exact(rfile, _HEADER.size))
    if size > max_frame:
        raise FrameTooLarge(f"announced frame of {size} bytes exceeds {max_frame}")
    return _read_exact(rfile, size)


def decode_body(body):
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ProtocolError(f"frame body is not JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ProtocolError("frame body must be a JSON object")
    return obj


def read_frame(rfile, max_frame=MAX_FRAME):
    return decode_body(read_frame_bytes(rfile, max_frame))


def pack_window(values):
    """Base64 of little-endian float32, the compact form of a window on the wire."""
    return base64.b64encode(np.asarray(values, dtype="<f4").ravel().tobytes()).decode("ascii")


def unpack_window(obj):
    """A window given either as a list of numbers or as :func:`pack_window` text."""
    if isinstance(obj, str):
        try:
            raw = base64.b64decode(obj, validate=True)
        except ValueError as exc:
            raise ProtocolError(f"bad base64 window: {exc}") from None
        if len(raw) % 4:
            raise ProtocolError("base64 window length is not a multiple of 4 bytes")
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if isinstance(obj, list):
        try:
            return np.asarray(obj, dtype=np.float32).ravel()
        except (TypeError, ValueError) as exc:
            raise ProtocolError(f"bad window values: {exc}") from None
    raise ProtocolError("window must be a list of numbers or a base64 string")
