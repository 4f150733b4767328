"""Verification metrics, ROC/EER and the n-shot x window-length evaluation grid.

Convention throughout: a trial is accepted iff ``score >= threshold``.
"""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NotCalibrated, TooFewSamples, UndefinedMetric
from .model import embed, shot_scores

GRID_WINDOWS = (1, 3, 5, 10, 15)
GRID_SHOTS = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")
        if self.tp + self.fp + self.tn + self.fn < 1:
            raise ValueError("confusion counts are all zero")

    @classmethod
    def from_scores(cls, scores, labels, threshold):
        scores, labels = _arrays(scores, labels)
        acc = scores >= threshold
        return cls(int((acc & labels).sum()), int((acc & ~labels).sum()),
                   int((~acc & ~labels).sum()), int((~acc & labels).sum()))

    def to_dict(self):
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


@dataclass(frozen=True)
class ScoredTrial:
    score: float
    genuine: bool


def _arrays(trials, labels=None):
    """(scores float64, genuine bool) from ScoredTrials or from two sequences."""
    if labels is None:
        trials = list(trials)
        scores = np.array([t.score for t in trials], dtype=np.float64)
        labels = np.array([t.genuine for t in trials], dtype=bool)
    else:
        scores = np.asarray(trials, dtype=np.float64).ravel()
        labels = np.asarray(labels).astype(bool).ravel()
    if len(scores) != len(labels):
        raise ValueError("scores and labels differ in length")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    return scores, labels


def far(c):
    if c.fp + c.tn == 0:
        raise UndefinedMetric("FAR undefined without impostor trials")
    return c.fp / (c.fp + c.tn)


def frr(c):
    if c.fn + c.tp == 0:
        raise UndefinedMetric("FRR undefined without genuine trials")
    return c.fn / (c.fn + c.tp)


def precision_recall_f1(c):
    if c.tp + c.fp == 0:
        raise UndefinedMetric("precision undefined: nothing accepted")
    if c.tp + c.fn == 0:
        raise UndefinedMetric("recall undefined: no genuine trials")
    pr = c.tp / (c.tp + c.fp)
    re = c.tp / (c.tp + c.fn)
    f1 = 0.0 if pr + re == 0 else 2 * pr * re / (pr + re)
    return pr, re, f1


def _sweep(scores, labels):
    """FAR/FRR at every unique score used as threshold, plus a reject-all point."""
    n_gen = int(labels.sum())
    n_imp = len(labels) - n_gen
    if n_gen == 0 or n_imp == 0:
        raise UndefinedMetric("need at least one genuine and one impostor trial")
    thr = np.unique(scores)
    # counts of scores strictly below each threshold
    gen_below = np.searchsorted(np.sort(scores[labels]), thr, side="left")
    imp_below = np.searchsorted(np.sort(scores[~labels]), thr, side="left")
    far_k = np.append((n_imp - imp_below) / n_imp, 0.0)
    frr_k = np.append(gen_below / n_gen, 1.0)
    thr = np.append(thr, np.nextafter(thr[-1], np.inf))
    return thr, far_k, frr_k


def roc_curve(trials, labels=None):
    """(far, tpr, thresholds), FAR ascending, starting at (0, 0) and ending at (1, 1)."""
    scores, labels = _arrays(trials, labels)
    thr, far_k, frr_k = _sweep(scores, labels)
    return far_k[::-1], 1.0 - frr_k[::-1], thr[::-1]


def roc_auc(trials, labels=None):
    far_c, tpr_c, _ = roc_curve(trials, labels)
    auc = float(np.sum(np.diff(far_c) * (tpr_c[1:] + tpr_c[:-1]) / 2))
    return (far_c, tpr_c), min(max(auc, 0.0), 1.0)


@dataclass(frozen=True)
class EERResult:
    eer: float
    threshold: float
    far_at_t: float
    frr_at_t: float


def eer_details(trials, labels=None):
    """Equal error rate by a sweep over the unique scores.

    The operating point is the sweep index minimizing ``|FAR - FRR|``; the
    threshold returned is the midpoint between that score and the next
    lower one, so it realizes exactly that point. The EER itself is read
    off the crossing of the two curves, linearly interpolated between the
    neighbouring sweep points when no point has ``FAR == FRR``.
    """
    scores, labels = _arrays(trials, labels)
    thr, far_k, frr_k = _sweep(scores, labels)
    d = far_k - frr_k  # non-increasing in k
    k = int(np.argmin(np.abs(d)))
    if d[k] == 0:
        value = far_k[k]
    else:
        j = int(np.nonzero(d > 0)[0][-1])  # d[0] >= 0 always; d[-1] = -1 < 0
        lam = d[j] / (d[j] - d[j + 1])
        value = far_k[j] + lam * (far_k[j + 1] - far_k[j])
    if k == 0 or k == len(thr) - 1:
        t = thr[k]
    else:
        t = (thr[k - 1] + thr[k]) / 2
    return EERResult(float(value), float(t), float(far_k[k]), float(frr_k[k]))


def eer(trials, labels=None):
    r = eer_details(trials, labels)
    return r.eer, r.threshold


def summarize(scores, labels, threshold):
    """Every metric at one threshold, tolerant of one-sided acceptance."""
    c = ConfusionCounts.from_scores(scores, labels, threshold)
    try:
        _, _, f1 = precision_recall_f1(c)
    except UndefinedMetric:
        f1 = 0.0
    _, auc = roc_auc(scores, labels)
    e = eer_details(scores, labels)
    return {"f1": f1, "far": far(c), "frr": frr(c), "auc": auc, "eer": e.eer,
            "threshold": float(threshold), "counts": c.to_dict()}


# -- n-shot grid ---------------------------------------------------------------

@dataclass
class CellResult:
    window_seconds: int
    n_shot: int
    metrics: dict            # mean over repeats of f1/far/frr/auc/eer
    sd: dict                 # standard deviation over repeats
    counts: list             # per repeat confusion counts
    trials: list             # per repeat {"scores": [...], "labels": [...]}
    threshold: float


@dataclass
class EvalGrid:
    cells: dict = field(default_factory=dict)   # (window_seconds, n_shot) -> CellResult
    windows: tuple = GRID_WINDOWS
    shots: tuple = GRID_SHOTS
    seed: int = 0

    def get(self, window_seconds, n_shot):
        return self.cells.get((window_seconds, n_shot))

    def to_csv(self, metric="f1"):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n_shot"] + [f"{s}s" for s in self.windows])
        for n in self.shots:
            row = [n]
            for s in self.windows:
                cell = self.get(s, n)
                row.append("skipped" if cell is None else f"{cell.metrics[metric]:.4f}")
            w.writerow(row)
        return buf.getvalue()

    def to_json(self):
        cells = []
        for (s, n), c in sorted(self.cells.items()):
            cells.append({"window_seconds": s, "n_shot": n, "threshold": c.threshold,
                          "metrics": c.metrics, "sd": c.sd, "counts": c.counts,
                          "trials": c.trials})
        skipped = [[s, n] for s in self.windows for n in self.shots if (s, n) not in self.cells]
        return {"seed": self.seed, "windows": list(self.windows), "shots": list(self.shots),
                "cells": cells, "skipped": skipped}

    def write(self, csv_path, json_path, metric="f1"):
        with open(csv_path, "w") as fh:
            fh.write(self.to_csv(metric))
        with open(json_path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def replay_cell(cell_json):
    """Recompute a cell's mean metrics from its logged trials."""
    per = [summarize(t["scores"], t["labels"], cell_json["threshold"]) for t in cell_json["trials"]]
    return {k: float(np.mean([p[k] for p in per])) for k in ("f1", "far", "frr", "auc", "eer")}


def _overlapping(pool, idx, enroll):
    """Mask over ``idx``: window shares samples with some enrollment window."""
    same = pool.session_ids[idx][:, None] == pool.session_ids[enroll][None, :]
    near = np.abs(pool.offsets[idx][:, None] - pool.offsets[enroll][None, :]) < pool.width
    return (same & near).any(axis=1)


def nshot_trials(pool, emb, model, n_shot, rng, probes_per_user=100):
    """Scores and labels of balanced genuine/impostor trials for one cell.

    For each user ``n_shot`` enrollment windows are drawn; genuine probes
    are that user's windows not overlapping any enrollment window, and
    impostor probes are drawn from the other users' windows.
    """
    users = pool.users
    if len(users) < 2:
        raise TooFewSamples("evaluation needs at least two users")
    scores, labels = [], []
    by_user = {u: np.nonzero(pool.user_ids == u)[0] for u in users}
    for u in users:
        idx = by_user[u]
        if len(idx) < n_shot + 1:
            raise TooFewSamples(f"user {u} has {len(idx)} windows; need {n_shot + 1}")
        enroll = rng.choice(idx, n_shot, replace=False)
        free = idx[~_overlapping(pool, idx, enroll)]
        if len(free) == 0:
            raise TooFewSamples(f"user {u}: no probe windows disjoint from enrollment")
        k = min(probes_per_user, len(free))
        genuine = rng.choice(free, k, replace=False)
        others = np.nonzero(pool.user_ids != u)[0]
        impostor = rng.choice(others, k, replace=len(others) < k)
        probes = np.concatenate([genuine, impostor])
        s = shot_scores(model, emb[probes], emb[enroll]).mean(axis=1)
        scores.append(s)
        labels.append(np.r_[np.ones(k, bool), np.zeros(k, bool)])
    return np.concatenate(scores), np.concatenate(labels)


def eval_nshot_grid(models, pools, shots=GRID_SHOTS, seed=0, repeats=1, probes_per_user=100):
    """Evaluate ``models[w]`` on ``pools[w]`` for every window length and shot count.

    Window lengths without a model or pool are recorded as skipped.
    """
    windows = tuple(sorted(set(GRID_WINDOWS) | set(models)))
    grid = EvalGrid(windows=windows, shots=tuple(shots), seed=seed)
    for w in windows:
        if w not in models or w not in pools:
            continue
        model = models[w]
        if not model.calibrated:
            raise NotCalibrated(f"{w} s model has no threshold")
        pool = pools[w]
        emb = embed(model, pool.values)
        for n in shots:
            per, counts, trials = [], [], []
            for r in range(repeats):
                rng = np.random.default_rng(np.random.SeedSequence([seed, w, n, r]))
                s, y = nshot_trials(pool, emb, model, n, rng, probes_per_user)
                m = summarize(s, y, model.threshold)
                per.append(m)
                counts.append(m["counts"])
                trials.append({"scores": s.tolist(), "labels": y.astype(int).tolist()})
            keys = ("f1", "far", "frr", "auc", "eer")
            grid.cells[(w, n)] = CellResult(
                w, n, {k: float(np.mean([p[k] for p in per])) for k in keys},
                {k: float(np.std([p[k] for p in per])) for k in keys},
                counts, trials, float(model.threshold))
    return grid
