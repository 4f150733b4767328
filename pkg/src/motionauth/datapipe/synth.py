"""Synthetic multi-user motion recordings.

Each channel is a sinusoid plus AR(1) noise plus a posture-dependent
offset. Profiles are per user; sessions jitter the profile a little so
that two sessions of one user are similar but not identical.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .records import SENSOR_ORDER, Posture, SensorSeries, SessionRecording

# acc, gyro, mag
_AMP_RANGE = ((0.2, 1.0), (0.1, 0.5), (0.5, 2.0))
_GRAVITY = 9.81
_POSTURE_TILT = {
    Posture.SITTING: np.array([0.0, 0.55, 0.83]),
    Posture.STANDING: np.array([0.0, 0.85, 0.52]),
    Posture.ON_TABLE: np.array([0.0, 0.0, 1.0]),
}
# ambient magnetic field seen in each posture, shared by all users
_POSTURE_FIELD = {
    Posture.SITTING: np.array([5.0, 20.0, -40.0]),
    Posture.STANDING: np.array([0.0, 35.0, -25.0]),
    Posture.ON_TABLE: np.array([0.0, 5.0, -45.0]),
}


@dataclass(frozen=True)
class SynthConfig:
    freq_range: tuple = (0.5, 4.0)
    noise_std: float = 0.25
    ar_range: tuple = (0.5, 0.95)
    tilt_std: float = 0.3         # per-user deviation of the gravity direction
    gyro_bias_std: float = 0.1
    mag_field_std: float = 15.0   # per-user magnetic offset spread
    freq_jitter: float = 0.05     # relative, per session
    amp_jitter: float = 0.1       # relative, per session
    offset_jitter: tuple = (0.2, 0.03, 3.0)  # absolute, per session, per modality
    period_ms: float = 5.0
    time_jitter_ms: float = 2.0
    # sensor gain applied to everything emitted (signal, noise, offsets); keeps the
    # three sensors within an order of magnitude of each other
    units_scale: tuple = (1.0, 10.0, 0.2)


DEFAULT_CONFIG = SynthConfig()


@dataclass
class SynthUserProfile:
    user_id: str
    frequencies: np.ndarray   # [9] Hz
    amplitudes: np.ndarray    # [9]
    phases: np.ndarray        # [9] radians
    ar_coef: float
    noise_std: float
    posture_offsets: dict = field(default_factory=dict)  # Posture -> [9]

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0 <= self.ar_coef < 1:
            raise ValueError("ar_coef must be in [0, 1)")
        if np.any(np.asarray(self.frequencies) <= 0):
            raise ValueError("frequencies must be > 0")

    def key(self):
        return tuple(np.round(np.concatenate([self.frequencies, self.amplitudes]), 12))


def _unit(v):
    return v / np.linalg.norm(v)


def gen_profile(user_seed, config=DEFAULT_CONFIG, user_id=None):
    rng = np.random.default_rng([user_seed, 0x5EED])
    lo, hi = config.freq_range
    freqs = rng.uniform(lo, hi, 9)
    amps = np.concatenate([rng.uniform(a, b, 3) for a, b in _AMP_RANGE])
    phases = rng.uniform(0, 2 * np.pi, 9)
    ar = float(rng.uniform(*config.ar_range))
    tilt = rng.normal(0, config.tilt_std, 3)
    gyro_bias = rng.normal(0, config.gyro_bias_std, 3)
    mag_bias = rng.normal(0, config.mag_field_std, 3)
    offsets = {}
    for posture in Posture:
        acc = _GRAVITY * _unit(_POSTURE_TILT[posture] + tilt)
        offsets[posture] = np.concatenate([acc, gyro_bias, _POSTURE_FIELD[posture] + mag_bias])
    return SynthUserProfile(user_id or f"u{user_seed:03d}", freqs, amps, phases, ar,
                            float(config.noise_std), offsets)


def _timestamps(rng, n, period, jitter):
    start = rng.uniform(0, 4 * period)
    return start + period * np.arange(n) + rng.uniform(-jitter, jitter, n)


def _ar_noise(rng, n, rho, std):
    if std == 0:
        return np.zeros(n)
    eps = rng.standard_normal(n) * std * np.sqrt(1 - rho * rho)
    # start from the stationary distribution
    eps[0] = rng.standard_normal() * std
    return lfilter([1.0], [1.0, -rho], eps)


def gen_session(profile, duration_s, posture, session_seed, config=DEFAULT_CONFIG,
                session_id=None, jitter=True):
    """One recording of ``duration_s`` seconds; deterministic in its inputs."""
    if duration_s < 2:
        raise ValueError("duration_s must be >= 2")
    posture = Posture(posture)
    seed_key = [session_seed, sum(map(ord, profile.user_id)), list(Posture).index(posture)]
    rng = np.random.default_rng(seed_key)
    freqs = np.array(profile.frequencies, dtype=np.float64)
    amps = np.array(profile.amplitudes, dtype=np.float64)
    phases = np.array(profile.phases, dtype=np.float64)
    offsets = np.array(profile.posture_offsets[posture], dtype=np.float64)
    if jitter:
        freqs = freqs * (1 + rng.normal(0, config.freq_jitter, 9))
        amps = amps * (1 + rng.normal(0, config.amp_jitter, 9))
        phases = rng.uniform(0, 2 * np.pi, 9)
        offsets = offsets + np.repeat(config.offset_jitter, 3) * rng.standard_normal(9)
    n = int(round(duration_s * 1000 / config.period_ms))
    series = {}
    for s, kind in enumerate(SENSOR_ORDER):
        t = _timestamps(rng, n, config.period_ms, config.time_jitter_ms)
        vals = np.empty((n, 3))
        for axis in range(3):
            c = 3 * s + axis
            vals[:, axis] = (offsets[c] + amps[c] * np.sin(2 * np.pi * freqs[c] * t / 1000 + phases[c])
                             + _ar_noise(rng, n, profile.ar_coef, profile.noise_std))
        series[kind] = SensorSeries(kind, t, vals * config.units_scale[s])
    sid = session_id or f"{posture.value}-{session_seed}"
    return SessionRecording(profile.user_id, sid, posture, series)


def gen_dataset(n_users, sessions_per_posture=5, duration_s=90, seed=0, config=DEFAULT_CONFIG,
                postures=tuple(Posture)):
    """Recordings for ``n_users`` users; user ``i`` uses profile seed ``seed * 1000 + i``."""
    recs = []
    for i in range(n_users):
        profile = gen_profile(seed * 1000 + i, config, user_id=f"u{i:03d}")
        for posture in postures:
            for k in range(sessions_per_posture):
                recs.append(gen_session(profile, duration_s, posture, seed * 100 + k, config,
                                        session_id=f"{posture.value}-{k}"))
    return recs
