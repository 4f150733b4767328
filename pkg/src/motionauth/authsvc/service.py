"""Enrollment and continuous n-shot verification with a fallback after repeated rejects."""

import hashlib
import hmac
import logging
import threading

import numpy as np

from ..errors import NoEnrollment, NotCalibrated, NotEnrolled, NotInFallback, Unauthorized
from ..model import embed, model_bytes, verify_nshot
from .state import FALLBACK
from .store import MAX_ENROLLMENT, EnrollmentRecord, Store

log = logging.getLogger(__name__)


def model_digest(model):
    return hashlib.sha256(model_bytes(model)).hexdigest()


class AuthService:
    """Stateful front end over an immutable calibrated model and a :class:`Store`.

    Operations on one user are serialized by a per-user lock, so concurrent
    verifies for that user update the counter in some serial order.
    """

    def __init__(self, model, store=None, operator_token=None):
        if not model.calibrated:
            raise NotCalibrated("the serving model has no decision threshold")
        self.model = model
        self.store = store if store is not None else Store()
        self.operator_token = operator_token
        self.digest = model_digest(model)
        self._locks = {}
        self._locks_guard = threading.Lock()

    def _lock(self, user_id):
        with self._locks_guard:
            return self._locks.setdefault(user_id, threading.Lock())

    def _record(self, user_id):
        rec = self.store.record(user_id)
        if rec is None:
            raise NotEnrolled(f"user {user_id!r} is not enrolled")
        if rec.model_digest != self.digest:
            raise NotEnrolled(f"user {user_id!r} was enrolled under a different model; re-enroll")
        return rec

    def enroll(self, user_id, windows):
        """Embed 1..16 windows and replace any earlier record for ``user_id``."""
        windows = [np.asarray(w, dtype=np.float32) for w in windows]
        if not windows:
            raise NoEnrollment("enrollment needs at least one window")
        if len(windows) > MAX_ENROLLMENT:
            raise ValueError(f"at most {MAX_ENROLLMENT} enrollment windows")
        emb = embed(self.model, np.stack([w.ravel() for w in windows]))
        rec = EnrollmentRecord(user_id, emb, self.store.clock(), self.digest)
        with self._lock(user_id):
            self.store.put_record(rec)
        return rec

    def verify(self, user_id, probe):
        """Score one probe window; the counter moves even while in fallback."""
        with self._lock(user_id):
            rec = self._record(user_id)
            score, accept = verify_nshot(self.model, np.asarray(probe, dtype=np.float32).ravel(),
                                         rec.embeddings)
            state = self.store.state(user_id).after(accept)
            self.store.set_state(user_id, state)
        return {"score": score, "accept": accept, **state.to_dict()}

    def reset_fallback(self, user_id, token):
        if not self.operator_token or not token or \
                not hmac.compare_digest(str(token), str(self.operator_token)):
            raise Unauthorized("a valid operator token is required")
        with self._lock(user_id):
            if self.store.record(user_id) is None:
                raise NotEnrolled(f"user {user_id!r} is not enrolled")
            if self.store.state(user_id).status != FALLBACK:
                raise NotInFallback(f"user {user_id!r} is not in fallback")
            self.store.reset(user_id)
            log.info("fallback reset for %s", user_id)
            return self.store.state(user_id).to_dict()

    def status(self, user_id):
        with self._lock(user_id):
            rec = self._record(user_id)
            return {"user_id": user_id, "n_enrolled": rec.n, **self.store.state(user_id).to_dict()}

    def close(self):
        self.store.close()
