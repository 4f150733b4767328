from dataclasses import dataclass

import numpy as np

from ..errors import NoOverlap, TooShort
from .records import SENSOR_ORDER, Posture

CHANNEL_NAMES = tuple(f"{k.value[:3]}_{a}" for k in SENSOR_ORDER for a in "xyz")


@dataclass
class ResampledSession:
    user_id: str
    session_id: str
    posture: Posture
    period: int
    channels: np.ndarray  # [9, n] in CHANNEL_NAMES order
    t0: float

    @property
    def length(self):
        return self.channels.shape[1]


def resample_axis(t, v, grid, period):
    """Values of one axis on ``grid``.

    A grid point whose bin ``[g, g + period)`` holds raw samples gets their
    mean; an empty bin is filled by linear interpolation between the raw
    samples around ``g``.
    """
    n = len(grid)
    bins = np.floor((t - grid[0]) / period).astype(np.int64)
    ok = (bins >= 0) & (bins < n)
    counts = np.bincount(bins[ok], minlength=n)
    sums = np.bincount(bins[ok], weights=v[ok], minlength=n)
    out = np.interp(grid, t, v)
    filled = counts > 0
    out[filled] = sums[filled] / counts[filled]
    return out


def resample(rec, period_ms=5):
    """Put all nine axes of ``rec`` on one uniform grid of ``period_ms``.

    The grid starts at the latest first timestamp among the sensors and
    stops at or before the earliest last timestamp.
    """
    if period_ms <= 0:
        raise ValueError("period_ms must be > 0")
    series = [rec.series[k] for k in SENSOR_ORDER]
    for s in series:
        if s.span_ms < 2 * period_ms:
            raise TooShort(f"{s.kind.value} spans {s.span_ms} ms < {2 * period_ms} ms")
    start = max(s.timestamps[0] for s in series)
    end = min(s.timestamps[-1] for s in series)
    if end < start:
        raise NoOverlap(f"session {rec.session_id}: sensor time ranges do not intersect")
    n = int(np.floor((end - start) / period_ms)) + 1
    grid = start + period_ms * np.arange(n, dtype=np.float64)
    channels = np.empty((9, n), dtype=np.float64)
    for si, s in enumerate(series):
        for axis in range(3):
            channels[3 * si + axis] = resample_axis(s.timestamps, s.values[:, axis], grid, period_ms)
    return ResampledSession(rec.user_id, rec.session_id, rec.posture, period_ms, channels, float(start))
