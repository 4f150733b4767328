"""Threaded TCP front end for :class:`AuthService`."""

import logging
import socketserver
import threading

from ..errors import MotionAuthError, ProtocolError
from .protocol import MAX_FRAME, FrameTooLarge, decode_body, encode_frame, read_frame_bytes, unpack_window

log = logging.getLogger(__name__)


def _user(payload):
    user = payload.get("user_id")
    if not isinstance(user, str) or not user:
        raise ProtocolError("payload.user_id must be a non-empty string")
    return user


def dispatch(service, op, payload):
    """Run one request; returns the response payload or raises."""
    if op == "ping":
        return {"pong": True}
    if op == "enroll":
        windows = payload.get("windows")
        if not isinstance(windows, list):
            raise ProtocolError("payload.windows must be a list")
        rec = service.enroll(_user(payload), [unpack_window(w) for w in windows])
        return {"user_id": rec.user_id, "n_enrolled": rec.n}
    if op == "verify":
        if "window" not in payload:
            raise ProtocolError("payload.window is required")
        return service.verify(_user(payload), unpack_window(payload["window"]))
    if op == "reset_fallback":
        return service.reset_fallback(_user(payload), payload.get("token"))
    if op == "status":
        return service.status(_user(payload))
    raise ProtocolError(f"unknown op {op!r}")


def _error(exc):
    code = getattr(exc, "code", None)
    if code is None:
        code = "bad_request" if isinstance(exc, (ValueError, TypeError)) else "internal"
    return {"code": code, "message": str(exc)}


def handle_request(service, body):
    """Response object for one frame body; never raises for bad requests."""
    request_id = None
    try:
        req = decode_body(body)
        request_id = req.get("request_id")
        op = req.get("op")
        payload = req.get("payload") or {}
        if not isinstance(op, str):
            raise ProtocolError("op must be a string")
        if not isinstance(payload, dict):
            raise ProtocolError("payload must be an object")
        return {"request_id": request_id, "ok": True, "payload": dispatch(service, op, payload)}
    except (MotionAuthError, ValueError, TypeError) as exc:
        return {"request_id": request_id, "ok": False, "error": _error(exc)}
    except Exception as exc:  # keep the connection alive, report the failure
        log.exception("request failed")
        return {"request_id": request_id, "ok": False, "error": {"code": "internal", "message": str(exc)}}


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        server = self.server
        while True:
            try:
                body = read_frame_bytes(self.rfile, server.max_frame)
            except EOFError:
                return
            except FrameTooLarge as exc:
                # the body is not read, so the stream cannot be resynchronized
                self._send({"request_id": None, "ok": False, "error": _error(exc)})
                return
            except OSError:
                return
            if not self._send(handle_request(server.service, body)):
                return

    def _send(self, obj):
        try:
            frame = encode_frame(obj, self.server.max_frame)
        except FrameTooLarge as exc:
            frame = encode_frame({"request_id": obj.get("request_id"), "ok": False, "error": _error(exc)})
        try:
            self.wfile.write(frame)
            self.wfile.flush()
            return True
        except OSError:
            return False


class AuthServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, service, max_frame=MAX_FRAME):
        self.service = service
        self.max_frame = max_frame
        super().__init__(address, _Handler)

    @property
    def address(self):
        return self.server_address[:2]

    def start(self):
        """Serve on a background thread; returns the thread."""
        t = threading.Thread(target=self.serve_forever, name="motionauth-server", daemon=True)
        t.start()
        return t

    def stop(self):
        """Stop accepting requests, then flush and close the store."""
        self.shutdown()
        self.server_close()
        self.service.close()


def serve(address, service, max_frame=MAX_FRAME, on_ready=None):
    """Run until interrupted; the store is flushed on the way out.

    ``on_ready(host, port)`` is called once the socket is bound (useful with port 0).
    """
    server = AuthServer(address, service, max_frame)
    log.info("listening on %s:%d", *server.address)
    if on_ready is not None:
        on_ready(*server.address)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        service.close()
