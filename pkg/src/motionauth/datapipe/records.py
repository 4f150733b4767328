"""Raw sensor recordings: types, CSV/manifest parsing and export."""

import csv
import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import MalformedSeries, MissingModality

CSV_HEADER = ["timestamp_ms", "x", "y", "z"]


class SensorKind(str, enum.Enum):
    ACCELEROMETER = "accelerometer"
    GYROSCOPE = "gyroscope"
    MAGNETOMETER = "magnetometer"


SENSOR_ORDER = (SensorKind.ACCELEROMETER, SensorKind.GYROSCOPE, SensorKind.MAGNETOMETER)


class Posture(str, enum.Enum):
    SITTING = "sitting"
    STANDING = "standing"
    ON_TABLE = "on_table"


@dataclass
class SensorSeries:
    kind: SensorKind
    timestamps: np.ndarray  # float64 milliseconds, strictly increasing
    values: np.ndarray      # [n, 3] x/y/z

    def __post_init__(self):
        self.kind = SensorKind(self.kind)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1, 3)
        if len(self.timestamps) != len(self.values):
            raise MalformedSeries(f"{self.kind.value}: timestamp/value length mismatch")
        if len(self.timestamps) < 2:
            raise MalformedSeries(f"{self.kind.value}: need at least 2 samples")
        bad = np.nonzero(np.diff(self.timestamps) <= 0)[0]
        if len(bad):
            raise MalformedSeries(f"{self.kind.value}: timestamps not strictly increasing "
                                  f"at sample {bad[0] + 1}")

    @property
    def span_ms(self):
        return float(self.timestamps[-1] - self.timestamps[0])


@dataclass
class SessionRecording:
    user_id: str
    session_id: str
    posture: Posture
    series: dict = field(default_factory=dict)  # SensorKind -> SensorSeries

    def __post_init__(self):
        self.posture = Posture(self.posture)
        if not self.user_id:
            raise ValueError("user_id must be non-empty")
        missing = [k.value for k in SENSOR_ORDER if k not in self.series]
        if missing:
            raise MissingModality(f"session {self.session_id}: missing {', '.join(missing)}")


def read_sensor_csv(path, kind):
    """Parse a ``timestamp_ms,x,y,z`` file; errors carry 1-based line numbers."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise MalformedSeries(f"{path}: expected header {','.join(CSV_HEADER)}", line=1)
        prev = -np.inf
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise MalformedSeries(f"{path}: expected 4 fields, got {len(row)}", line=lineno)
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise MalformedSeries(f"{path}: unparsable row {','.join(row)!r}", line=lineno) from None
            if not all(np.isfinite(vals)):
                raise MalformedSeries(f"{path}: non-finite value", line=lineno)
            if vals[0] <= prev:
                raise MalformedSeries(f"{path}: non-monotonic timestamp", line=lineno)
            prev = vals[0]
            rows.append(vals)
    if len(rows) < 2:
        raise MalformedSeries(f"{path}: need at least 2 samples")
    arr = np.asarray(rows, dtype=np.float64)
    return SensorSeries(kind, arr[:, 0], arr[:, 1:])


def write_sensor_csv(path, series):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for t, (x, y, z) in zip(series.timestamps, series.values):
            fh.write(f"{t:.3f},{x:.6f},{y:.6f},{z:.6f}\n")


def session_from_manifest(entry, base_dir="."):
    """Build a :class:`SessionRecording` from one manifest object."""
    base_dir = Path(base_dir)
    series = {}
    for kind in SENSOR_ORDER:
        rel = entry.get(kind.value)
        if not rel:
            raise MissingModality(f"manifest has no {kind.value} file")
        path = base_dir / rel
        if not path.is_file():
            raise MissingModality(f"{kind.value} file not found: {path}")
        series[kind] = read_sensor_csv(path, kind)
    return SessionRecording(str(entry["user_id"]), str(entry["session_id"]),
                            entry.get("posture", Posture.SITTING.value), series)


def parse_session(manifest_path):
    manifest_path = Path(manifest_path)
    with open(manifest_path) as fh:
        entry = json.load(fh)
    return session_from_manifest(entry, manifest_path.parent)


def load_dataset(manifest_path):
    """Read a dataset manifest (JSON array of session manifests)."""
    manifest_path = Path(manifest_path)
    with open(manifest_path) as fh:
        entries = json.load(fh)
    if not isinstance(entries, list):
        raise ValueError(f"{manifest_path}: dataset manifest must be a JSON array")
    return [session_from_manifest(e, manifest_path.parent) for e in entries]


def export_session(rec, out_dir):
    """Write the three CSVs for ``rec`` under ``out_dir``; return its manifest entry."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entry = {"user_id": rec.user_id, "session_id": rec.session_id,
             "posture": rec.posture.value}
    for kind in SENSOR_ORDER:
        name = f"{rec.user_id}_{rec.session_id}_{kind.value}.csv"
        write_sensor_csv(out_dir / name, rec.series[kind])
        entry[kind.value] = name
    return entry


def write_manifest(path, entries):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(entries, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
