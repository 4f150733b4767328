"""Enrollment records and failure counters persisted as a JSON-lines journal.

Each line is one event: ``enroll`` (full record), ``counter`` (new failure
count) or ``reset`` (fallback cleared by an operator). Replaying the journal
rebuilds the state; compaction rewrites it as one ``enroll`` and one
``counter`` event per user, via a temporary file and an atomic rename.
"""

import json
import os
import threading
import time
from dataclasses import dataclass

import numpy as np

from ..errors import StoreError
from .state import VerificationState

MAX_ENROLLMENT = 16


@dataclass(frozen=True)
class EnrollmentRecord:
    user_id: str
    embeddings: np.ndarray   # [n, 32], unit rows, read-only
    created_at: float
    model_digest: str

    def __post_init__(self):
        emb = np.array(self.embeddings, dtype=np.float32, ndmin=2)
        if not 1 <= len(emb) <= MAX_ENROLLMENT:
            raise ValueError(f"enrollment needs 1..{MAX_ENROLLMENT} embeddings, got {len(emb)}")
        norms = np.linalg.norm(emb, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-3):
            raise ValueError("enrollment embeddings must be unit-norm")
        emb.flags.writeable = False
        object.__setattr__(self, "embeddings", emb)

    @property
    def n(self):
        return len(self.embeddings)

    def to_event(self):
        return {"type": "enroll", "user_id": self.user_id,
                "embeddings": [[float(v) for v in row] for row in self.embeddings],
                "created_at": self.created_at, "model_digest": self.model_digest}

    @classmethod
    def from_event(cls, ev):
        return cls(ev["user_id"], np.array(ev["embeddings"], dtype=np.float32),
                   float(ev["created_at"]), ev["model_digest"])


class Store:
    """Thread-safe journal-backed store; a single writer appends under a lock.

    ``path=None`` keeps everything in memory. A torn final line (crash
    during an append) is ignored on load; corruption anywhere else raises
    :class:`StoreError`.
    """

    def __init__(self, path=None, compact_every=1000, fsync=False, clock=time.time):
        self.path = None if path is None else os.fspath(path)
        self.compact_every = compact_every
        self.fsync = fsync
        self.clock = clock
        self.records = {}
        self.states = {}
        self.audit = []
        self._lock = threading.Lock()
        self._events = 0
        self._fh = None
        if self.path is not None:
            self._load()
            try:
                self._fh = open(self.path, "a", encoding="utf-8")
            except OSError as exc:
                raise StoreError(f"cannot open store {self.path}: {exc}") from exc

    # -- journal -----------------------------------------------------------------

    def _load(self):
        if not os.path.exists(self.path):
            return
        try:
            with open(self.path, "rb") as fh:
                data = fh.read()
        except OSError as exc:
            raise StoreError(f"cannot read store {self.path}: {exc}") from exc
        # bytes after the last newline are a torn write
        cut = data.rfind(b"\n") + 1
        for i, line in enumerate(data[:cut].split(b"\n")[:-1]):
            if not line.strip():
                continue
            try:
                self._apply(json.loads(line.decode("utf-8")))
            except (ValueError, KeyError, TypeError) as exc:
                raise StoreError(f"{self.path}:{i + 1}: bad journal entry ({exc})") from exc
            self._events += 1
        if cut < len(data):
            with open(self.path, "r+b") as fh:
                fh.truncate(cut)

    def _apply(self, ev):
        kind, user = ev["type"], ev["user_id"]
        if kind == "enroll":
            self.records[user] = EnrollmentRecord.from_event(ev)
            self.states.setdefault(user, VerificationState())
        elif kind == "counter":
            self.states[user] = VerificationState(int(ev["consecutive_failures"]))
        elif kind == "reset":
            self.states[user] = VerificationState()
            self.audit.append(ev)
        else:
            raise ValueError(f"unknown event type {kind!r}")

    def _append(self, ev):
        if self.path is None:
            self._apply(ev)
            return
        if self._fh is None:
            raise StoreError("store is closed")
        try:
            self._fh.write(json.dumps(ev, sort_keys=True) + "\n")
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
        except OSError as exc:
            raise StoreError(f"cannot append to {self.path}: {exc}") from exc
        # memory follows the journal, never the other way round
        self._apply(ev)
        self._events += 1
        if self.compact_every and self._events >= self.compact_every + 2 * len(self.records):
            self._compact_locked()

    def _compact_locked(self):
        if self.path is None:
            return
        tmp = self.path + ".tmp"
        try:
            with open(tmp, "w", encoding="utf-8") as fh:
                for user in sorted(self.records):
                    fh.write(json.dumps(self.records[user].to_event(), sort_keys=True) + "\n")
                    st = self.states.get(user, VerificationState())
                    fh.write(json.dumps({"type": "counter", "user_id": user,
                                         "consecutive_failures": st.consecutive_failures}) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            if self._fh is not None:
                self._fh.close()
            os.replace(tmp, self.path)
            self._fh = open(self.path, "a", encoding="utf-8")
        except OSError as exc:
            raise StoreError(f"compaction of {self.path} failed: {exc}") from exc
        self._events = 2 * len(self.records)

    # -- public API --------------------------------------------------------------

    def put_record(self, record):
        with self._lock:
            self._append(record.to_event())

    def record(self, user_id):
        return self.records.get(user_id)

    def state(self, user_id):
        return self.states.get(user_id, VerificationState())

    def set_state(self, user_id, state):
        with self._lock:
            self._append({"type": "counter", "user_id": user_id,
                          "consecutive_failures": state.consecutive_failures})

    def reset(self, user_id, operator="operator"):
        with self._lock:
            self._append({"type": "reset", "user_id": user_id, "operator": operator,
                          "at": self.clock()})

    def compact(self):
        with self._lock:
            self._compact_locked()

    def close(self):
        with self._lock:
            if self._fh is not None:
                self._fh.flush()
                self._fh.close()
                self._fh = None
