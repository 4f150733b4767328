"""Blocking client for the verification service."""

import itertools
import socket

from ..errors import MotionAuthError
from .protocol import MAX_FRAME, encode_frame, pack_window, read_frame


class ServiceError(MotionAuthError):
    def __init__(self, code, message):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


class AuthClient:
    def __init__(self, host, port, timeout=30.0, max_frame=MAX_FRAME):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.rfile = self.sock.makefile("rb")
        self.max_frame = max_frame
        self._ids = itertools.count(1)

    def call(self, op, payload=None, request_id=None):
        """Send one request and return the response payload; errors raise :class:`ServiceError`."""
        rid = request_id if request_id is not None else next(self._ids)
        self.sock.sendall(encode_frame({"op": op, "request_id": rid, "payload": payload or {}}, self.max_frame))
        resp = read_frame(self.rfile, self.max_frame)
        if resp.get("request_id") != rid:
            raise ServiceError("bad_response", f"request_id {resp.get('request_id')!r} != {rid!r}")
        if not resp.get("ok"):
            err = resp.get("error") or {}
            raise ServiceError(err.get("code", "unknown"), err.get("message", ""))
        return resp["payload"]

    def ping(self):
        return self.call("ping")

    def enroll(self, user_id, windows):
        return self.call("enroll", {"user_id": user_id, "windows": [pack_window(w) for w in windows]})

    def verify(self, user_id, window):
        return self.call("verify", {"user_id": user_id, "window": pack_window(window)})

    def reset_fallback(self, user_id, token):
        return self.call("reset_fallback", {"user_id": user_id, "token": token})

    def status(self, user_id):
        return self.call("status", {"user_id": user_id})

    def close(self):
        self.rfile.close()
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
