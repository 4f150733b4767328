"""Sliding windows and the array-backed pool they are stored in."""

from dataclasses import dataclass

import numpy as np

from .. import binfmt
from ..errors import CorruptModelFile, TooShort
from .resample import CHANNEL_NAMES

WINDOW_SECONDS = (1, 3, 5, 10, 15)
MODALITIES = {
    "all": tuple(range(9)),
    "accelerometer": (0, 1, 2),
    "gyroscope": (3, 4, 5),
    "magnetometer": (6, 7, 8),
}


def samples_per_channel(window_seconds, period_ms=5):
    if window_seconds not in WINDOW_SECONDS:
        raise ValueError(f"window_seconds must be one of {WINDOW_SECONDS}, got {window_seconds}")
    return window_seconds * 1000 // period_ms


def window_count(length, width):
    step = max(width // 10, 1)
    return (length - width) // step + 1 if length >= width else 0


@dataclass
class Window:
    user_id: str
    source_session_id: str
    offset_index: int
    values: np.ndarray
    window_seconds: int


@dataclass
class WindowPool:
    """Windows stored row-wise; ``values[i]`` is channel-major (9 slices of W)."""

    values: np.ndarray       # [N, 9 * W] float32
    user_ids: np.ndarray     # [N] str
    session_ids: np.ndarray  # [N] str
    offsets: np.ndarray      # [N] int
    window_seconds: int
    period_ms: int = 5

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.user_ids = np.asarray(self.user_ids, dtype=str)
        self.session_ids = np.asarray(self.session_ids, dtype=str)
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        n = len(self.values)
        if not (len(self.user_ids) == len(self.session_ids) == len(self.offsets) == n):
            raise ValueError("pool field lengths differ")
        if self.values.ndim != 2 or self.values.shape[1] != 9 * self.width:
            raise ValueError(f"window rows must have {9 * self.width} values")

    @property
    def width(self):
        return samples_per_channel(self.window_seconds, self.period_ms)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return Window(str(self.user_ids[i]), str(self.session_ids[i]), int(self.offsets[i]),
                      self.values[i], self.window_seconds)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def users(self):
        return sorted(set(self.user_ids.tolist()))

    def select(self, idx):
        idx = np.asarray(idx)
        return WindowPool(self.values[idx], self.user_ids[idx], self.session_ids[idx],
                          self.offsets[idx], self.window_seconds, self.period_ms)

    def for_users(self, users):
        return self.select(np.nonzero(np.isin(self.user_ids, list(users)))[0])

    def shuffled(self, seed):
        return self.select(np.random.default_rng(seed).permutation(len(self)))

    def subsample(self, n, seed):
        """At most ``n`` windows drawn without replacement, original order kept."""
        if n >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).choice(len(self), n, replace=False))
        return self.select(idx)

    def tensor(self, channels=None, idx=None):
        """Network input ``[N, W, C]`` for the given channel indices."""
        vals = self.values if idx is None else self.values[idx]
        x = vals.reshape(len(vals), 9, self.width)
        if channels is not None:
            x = x[:, list(channels), :]
        return np.ascontiguousarray(x.transpose(0, 2, 1))

    @classmethod
    def concat(cls, pools):
        pools = list(pools)
        if not pools:
            raise ValueError("nothing to concatenate")
        ws = {p.window_seconds for p in pools}
        if len(ws) != 1:
            raise ValueError(f"mixed window lengths {sorted(ws)}")
        return cls(np.concatenate([p.values for p in pools]),
                   np.concatenate([p.user_ids for p in pools]),
                   np.concatenate([p.session_ids for p in pools]),
                   np.concatenate([p.offsets for p in pools]),
                   pools[0].window_seconds, pools[0].period_ms)


def make_windows(rs, window_seconds):
    width = samples_per_channel(window_seconds, rs.period)
    length = rs.length
    if length < width:
        raise TooShort(f"session {rs.session_id}: {length} samples < window of {width}")
    step = width // 10
    starts = np.arange(window_count(length, width)) * step
    view = np.lib.stride_tricks.sliding_window_view(rs.channels, width, axis=1)  # [9, L-W+1, W]
    vals = view[:, starts, :].transpose(1, 0, 2).reshape(len(starts), 9 * width)
    if not np.isfinite(vals).all():
        raise ValueError(f"session {rs.session_id}: non-finite samples")
    n = len(starts)
    return WindowPool(vals, [rs.user_id] * n, [rs.session_id] * n, starts, window_seconds, rs.period)


def windows_from_sessions(sessions, window_seconds, per_session=None, seed=0):
    """Windows of every session; ``per_session`` keeps a seeded subset of each."""
    pools = []
    for i, rs in enumerate(sessions):
        pool = make_windows(rs, window_seconds)
        if per_session is not None:
            pool = pool.subsample(per_session, seed=[seed, i])
        pools.append(pool)
    return WindowPool.concat(pools)


def save_window_cache(path, pool):
    header = {"kind": "windows", "count": len(pool), "window_seconds": pool.window_seconds,
              "dim": pool.values.shape[1], "period_ms": pool.period_ms,
              "user_ids": pool.user_ids.tolist(), "session_ids": pool.session_ids.tolist(),
              "offsets": pool.offsets.tolist(), "channel_order": list(CHANNEL_NAMES)}
    binfmt.write_file(path, header, [("values", pool.values)])


def load_window_cache(path):
    header, arrays = binfmt.read_file(path)
    if header.get("kind") != "windows" or "values" not in arrays:
        raise CorruptModelFile(f"{path}: not a window cache")
    vals = arrays["values"]
    if vals.shape != (header["count"], header["dim"]):
        raise CorruptModelFile(f"{path}: payload shape {vals.shape} disagrees with header")
    return WindowPool(vals, header["user_ids"], header["session_ids"], header["offsets"],
                      header["window_seconds"], header.get("period_ms", 5))
