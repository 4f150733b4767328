"""Enrollment store and verification service."""

from .client import AuthClient, ServiceError
from .protocol import MAX_FRAME, FrameTooLarge, encode_frame, pack_window, read_frame, unpack_window
from .server import AuthServer, dispatch, handle_request, serve
from .service import AuthService, model_digest
from .state import ACTIVE, FALLBACK, FALLBACK_AFTER, VerificationState
from .store import MAX_ENROLLMENT, EnrollmentRecord, Store

__all__ = [
    "ACTIVE", "AuthClient", "AuthServer", "AuthService", "EnrollmentRecord", "FALLBACK",
    "FALLBACK_AFTER", "FrameTooLarge", "MAX_ENROLLMENT", "MAX_FRAME", "ServiceError", "Store",
    "VerificationState", "dispatch", "encode_frame", "handle_request", "model_digest",
    "pack_window", "read_frame", "serve", "unpack_window",
]
