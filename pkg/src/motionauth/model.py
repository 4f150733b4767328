"""Siamese embedding net, distance function, decision net and n-shot verification."""

from dataclasses import dataclass, field

import numpy as np

from . import binfmt
from .datapipe.resample import CHANNEL_NAMES
from .datapipe.windows import Window, samples_per_channel
from .errors import CorruptModelFile, IncompatibleModelFile, NoEnrollment, NotCalibrated, ShapeError
from .nncore import (BatchNorm, Conv1D, Dense, Dropout, Flatten, L2Normalize, MaxPool1D, ParamSet,
                     ReLU, Sequential, spec_from_dict)

MODEL_FORMAT_VERSION = 1
EMBEDDING_DIM = 32
L2 = 1e-3
ALL_CHANNELS = tuple(range(9))


def embedding_specs():
    return [
        Conv1D(64, 5, l2=L2), BatchNorm(), ReLU(),
        Conv1D(128, 5, l2=L2), BatchNorm(), ReLU(),
        Conv1D(256, 3, l2=L2), BatchNorm(), ReLU(),
        MaxPool1D(4), Flatten(), Dense(EMBEDDING_DIM), L2Normalize(),
    ]


def decision_specs():
    return [
        Dense(32, "relu", l2=L2), BatchNorm(),
        Dense(16, "relu", l2=L2), BatchNorm(),
        Dropout(0.25), Dense(1, "sigmoid"),
    ]


def build_embedding_net(window_seconds, n_channels=9, seed=0, period_ms=5, specs=None):
    width = samples_per_channel(window_seconds, period_ms)
    return Sequential(specs or embedding_specs(), (width, n_channels), seed=seed)


def build_decision_net(seed=0, specs=None):
    return Sequential(specs or decision_specs(), (EMBEDDING_DIM,), seed=seed)


@dataclass
class AuthModel:
    embedding: Sequential
    decision: Sequential
    window_seconds: int
    channels: tuple = ALL_CHANNELS
    threshold: float = None
    aggregation: str = "mean"   # or "majority"
    metadata: dict = field(default_factory=dict)
    period_ms: int = 5

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        width = samples_per_channel(self.window_seconds, self.period_ms)
        if self.embedding.input_shape != (width, len(self.channels)):
            raise ShapeError(f"embedding input {self.embedding.input_shape} does not fit "
                             f"{self.window_seconds} s windows over {len(self.channels)} channels")
        if self.decision.input_shape != (EMBEDDING_DIM,):
            raise ShapeError("decision net must take a 32-dim distance vector")
        if self.aggregation not in ("mean", "majority"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")

    @property
    def width(self):
        return samples_per_channel(self.window_seconds, self.period_ms)

    @property
    def calibrated(self):
        return self.threshold is not None


def new_model(window_seconds, channels=ALL_CHANNELS, seed=0, **kw):
    """Untrained model; the embedding and decision nets get distinct seeds."""
    emb = build_embedding_net(window_seconds, len(channels), seed=seed)
    dec = build_decision_net(seed=seed + 1)
    return AuthModel(emb, dec, window_seconds, tuple(channels), **kw)


def _as_batch(model, windows):
    """Network input ``[N, W, C]`` from a Window, a flat vector or a ``[N, 9W]`` array."""
    if isinstance(windows, Window):
        if windows.window_seconds != model.window_seconds:
            raise ShapeError(f"{windows.window_seconds} s window for a {model.window_seconds} s model")
        windows = windows.values
    x = np.asarray(windows, dtype=np.float32)
    if x.ndim == 1:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != 9 * model.width:
        raise ShapeError(f"expected windows of {9 * model.width} values, got shape {x.shape}")
    x = x.reshape(len(x), 9, model.width)[:, list(model.channels), :]
    return np.ascontiguousarray(x.transpose(0, 2, 1))


def embed(model, windows, train=False, batch_size=256):
    """Unit-norm 32-d embeddings; a single window gives a single vector."""
    single = isinstance(windows, Window) or np.ndim(windows) == 1
    x = _as_batch(model, windows)
    out = model.embedding.forward(x, train=True) if train else model.embedding.predict(x, batch_size)
    return out[0] if single else out


def distance_vector(e1, e2):
    return np.abs(np.asarray(e1) - np.asarray(e2))


def decide(model, d, batch_size=4096):
    """Same-user probability for distance vector(s) ``d``."""
    d = np.asarray(d, dtype=np.float32)
    single = d.ndim == 1
    if d.shape[-1] != EMBEDDING_DIM:
        raise ShapeError(f"distance vector must have {EMBEDDING_DIM} entries, got {d.shape[-1]}")
    p = model.decision.predict(d.reshape(-1, EMBEDDING_DIM), batch_size)[:, 0]
    return float(p[0]) if single else p


def shot_scores(model, probe_emb, enroll_emb):
    """Per-shot probabilities ``[P, n]`` for probe embeddings against enrollment embeddings."""
    probe_emb = np.atleast_2d(probe_emb)
    enroll_emb = np.atleast_2d(enroll_emb)
    d = np.abs(probe_emb[:, None, :] - enroll_emb[None, :, :])
    return decide(model, d.reshape(-1, EMBEDDING_DIM)).reshape(len(probe_emb), len(enroll_emb))


def aggregate(scores, threshold=None, how="mean"):
    """Collapse per-shot scores (last axis) into one score per probe."""
    scores = np.asarray(scores, dtype=np.float64)
    if how == "mean":
        return scores.mean(axis=-1)
    if threshold is None:
        raise NotCalibrated("majority vote needs a threshold")
    return (scores >= threshold).mean(axis=-1)


def verify_nshot(model, probe, enrollment, aggregation=None):
    """(score, accept) for one probe window against ``n`` enrollment embeddings.

    With majority aggregation the score is the fraction of accepting shots
    and acceptance needs a strict majority.
    """
    if enrollment is None or len(enrollment) == 0:
        raise NoEnrollment("no enrollment embeddings")
    if not model.calibrated:
        raise NotCalibrated("model has no threshold")
    how = aggregation or model.aggregation
    per_shot = shot_scores(model, embed(model, probe), np.asarray(enrollment))[0]
    score = float(aggregate(per_shot, model.threshold, how))
    accept = score > 0.5 if how == "majority" else score >= model.threshold
    return score, bool(accept)


def _header(model):
    return {
        "kind": "model",
        "model_format_version": MODEL_FORMAT_VERSION,
        "window_seconds": model.window_seconds,
        "period_ms": model.period_ms,
        "threshold": model.threshold,
        "channels": list(model.channels),
        "channel_order": [CHANNEL_NAMES[c] for c in model.channels],
        "aggregation": model.aggregation,
        "embedding_specs": model.embedding.spec_dicts(),
        "decision_specs": model.decision.spec_dicts(),
        "metadata": model.metadata,
    }


def _arrays(model):
    return model.embedding.params.arrays("embedding.") + model.decision.params.arrays("decision.")


def model_bytes(model):
    return binfmt.encode(_header(model), _arrays(model))


def save_model(model, path):
    binfmt.write_file(path, _header(model), _arrays(model))


def _params(arrays, prefix):
    ps = ParamSet()
    for name, arr in arrays.items():
        if name.startswith(prefix):
            key = name[len(prefix):]
            ps.add(key, arr.copy(), trainable=not key.endswith(("running_mean", "running_var")))
    return ps


def load_model(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    return model_from_bytes(blob)


def model_from_bytes(blob):
    header, arrays = binfmt.decode(blob)
    if header.get("kind") != "model":
        raise CorruptModelFile("file does not hold a model")
    if header.get("model_format_version", 0) > MODEL_FORMAT_VERSION:
        raise IncompatibleModelFile(f"model format {header['model_format_version']} is newer "
                                    f"than supported {MODEL_FORMAT_VERSION}")
    try:
        channels = tuple(header["channels"])
        width = samples_per_channel(header["window_seconds"], header.get("period_ms", 5))
        emb = Sequential([spec_from_dict(d) for d in header["embedding_specs"]], (width, len(channels)),
                         params=_params(arrays, "embedding."))
        dec = Sequential([spec_from_dict(d) for d in header["decision_specs"]], (EMBEDDING_DIM,),
                         params=_params(arrays, "decision."))
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptModelFile(f"inconsistent model file: {exc}") from exc
    return AuthModel(emb, dec, header["window_seconds"], channels, header.get("threshold"),
                     header.get("aggregation", "mean"), header.get("metadata", {}),
                     header.get("period_ms", 5))


__all__ = [
    "ALL_CHANNELS", "AuthModel", "EMBEDDING_DIM", "aggregate", "build_decision_net",
    "build_embedding_net", "decide", "decision_specs", "distance_vector", "embed",
    "embedding_specs", "load_model", "model_bytes", "model_from_bytes", "new_model",
    "save_model", "shot_scores", "verify_nshot",
]
