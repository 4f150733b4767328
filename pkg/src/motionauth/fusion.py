"""Score normalization and score-level fusion of per-modality matchers.

A trial is accepted iff its fused decision score is ``>= threshold``.
"""

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import metriclearn as ml
from .errors import DegenerateColumn, DegenerateFit, MalformedScoreFile, UndefinedMetric
from .evalkit import ConfusionCounts, eer_details, precision_recall_f1
from .nncore import Dense, Sequential, make_optimizer

NORMALIZATIONS = ("none", "zscore", "minmax")
METHODS = ("linear_regression", "logistic_regression", "mlp", "sum", "eer_weighted_sum")
MATCHERS = ("acc", "gyr", "mag")
LOGISTIC_L2 = 1e-3
EER_FLOOR = 1e-6


@dataclass
class ScoreMatrix:
    scores: np.ndarray          # [N, R]
    labels: np.ndarray          # [N] 1 genuine, 0 impostor
    names: tuple = None
    trial_ids: list = None

    def __post_init__(self):
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        self.labels = np.asarray(self.labels).astype(np.int64).ravel()
        if self.scores.shape[0] != len(self.labels):
            raise ValueError(f"{self.scores.shape[0]} score rows vs {len(self.labels)} labels")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 (impostor) or 1 (genuine)")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        r = self.scores.shape[1]
        if self.names is None:
            self.names = MATCHERS if r == len(MATCHERS) else tuple(f"m{j}" for j in range(r))
        self.names = tuple(self.names)
        if len(self.names) != r:
            raise ValueError(f"{len(self.names)} matcher names for {r} columns")
        if self.trial_ids is None:
            self.trial_ids = [str(i) for i in range(len(self.labels))]

    def __len__(self):
        return len(self.labels)

    @property
    def n_matchers(self):
        return self.scores.shape[1]

    def column(self, name):
        return self.scores[:, self.names.index(name)]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial_id", "label"] + [f"score_{n}" for n in self.names])
            for tid, y, row in zip(self.trial_ids, self.labels, self.scores):
                w.writerow([tid, int(y)] + [repr(float(s)) for s in row])


def read_scores(path, names=MATCHERS):
    """Read ``trial_id,label,score_<name>...``; every requested score column must exist."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        need = ["trial_id", "label"] + [f"score_{n}" for n in names]
        missing = [c for c in need if c not in header]
        if missing:
            raise MalformedScoreFile(f"{path}: missing column(s) {', '.join(missing)}")
        ids, labels, rows = [], [], []
        for lineno, rec in enumerate(reader, start=2):
            try:
                labels.append(int(rec["label"]))
                rows.append([float(rec[f"score_{n}"]) for n in names])
            except (TypeError, ValueError) as exc:
                raise MalformedScoreFile(f"{path}:{lineno}: {exc}") from None
            ids.append(rec["trial_id"])
    if not rows:
        raise MalformedScoreFile(f"{path}: no trials")
    return ScoreMatrix(np.array(rows), np.array(labels), tuple(names), ids)


# -- normalization ---------------------------------------------------------------

@dataclass
class Normalizer:
    kind: str
    a: np.ndarray = None   # mean or min
    b: np.ndarray = None   # std or max

    def apply(self, scores):
        scores = np.asarray(scores, dtype=np.float64)
        if self.kind == "none":
            return scores.copy()
        if self.kind == "zscore":
            return (scores - self.a) / self.b
        return (scores - self.a) / (self.b - self.a)


def fit_normalizer(train, kind):
    """Per-matcher statistics from the training scores; population std for zscore."""
    s = train.scores if isinstance(train, ScoreMatrix) else np.atleast_2d(np.asarray(train, np.float64))
    if kind == "none":
        return Normalizer("none")
    if kind == "zscore":
        mu, sd = s.mean(axis=0), s.std(axis=0)
        if np.any(sd <= 0):
            raise DegenerateColumn(f"zero variance in matcher column(s) {np.nonzero(sd <= 0)[0].tolist()}")
        return Normalizer("zscore", mu, sd)
    if kind == "minmax":
        lo, hi = s.min(axis=0), s.max(axis=0)
        if np.any(hi <= lo):
            raise DegenerateColumn(f"constant matcher column(s) {np.nonzero(hi <= lo)[0].tolist()}")
        return Normalizer("minmax", lo, hi)
    raise ValueError(f"unknown normalization {kind!r}")


def apply_normalizer(n, scores):
    return n.apply(scores)


# -- rule-based fusion -----------------------------------------------------------

def fuse_sum(ns, weights=None):
    """``sum_j w_j * ns_j`` over the last axis; ``weights=None`` is the pure sum."""
    ns = np.asarray(ns, dtype=np.float64)
    if weights is None:
        return ns.sum(axis=-1)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != ns.shape[-1:]:
        raise ValueError(f"{len(weights)} weights for {ns.shape[-1]} matchers")
    return ns @ weights


def eer_weights(eers):
    """``w_j = 1 / (EER_j * sum_k 1/EER_k)``; zero EERs are clamped with a warning."""
    e = np.asarray(eers, dtype=np.float64)
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise ValueError("EERs must be finite and non-negative")
    if np.any(e < EER_FLOOR):
        warnings.warn(f"matcher EER below {EER_FLOOR}; clamped", RuntimeWarning, stacklevel=2)
        e = np.maximum(e, EER_FLOOR)
    inv = 1.0 / e
    return inv / inv.sum()


# -- trained fusion --------------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _check_classes(labels):
    if len(np.unique(labels)) < 2:
        raise DegenerateFit("fusion training needs genuine and impostor trials")


def _fit_net(x, y, specs, seed, lr, steps):
    """Full-batch Adam on the mean BCE loss plus L2 penalties."""
    net = Sequential(specs, (x.shape[1],), seed=seed, dtype=np.float64)
    opt = make_optimizer("adam", lr)
    for _ in range(steps):
        p = net.forward(x, train=True)[:, 0]
        net.backward((ml.bce_grad(p, y) / len(y))[:, None])
        opt.step(net.params, net.grads)
    return net


def _fit_logistic_1d(f, y, seed=0):
    """Sigmoid-activated linear model on one fused score; returns (slope, intercept)."""
    sd = f.std()
    if sd <= 0:
        raise DegenerateFit("fused training scores are constant")
    z = ((f - f.mean()) / sd)[:, None]
    net = _fit_net(z, y, [Dense(1, "sigmoid")], seed, 0.05, 500)
    w = float(net.params["0.dense.w"][0, 0])
    b = float(net.params["0.dense.b"][0])
    if w <= 0:
        raise DegenerateFit("fused score does not increase with genuineness")
    return w / sd, b - w * f.mean() / sd


@dataclass
class FusionModel:
    kind: str
    normalizer: Normalizer
    weights: np.ndarray = None
    bias: float = 0.0
    eers: np.ndarray = None
    net: Sequential = field(default=None, repr=False)
    threshold: float = 0.5

    def __post_init__(self):
        if self.kind not in METHODS:
            raise ValueError(f"unknown fusion method {self.kind!r}")

    def score(self, scores):
        """Decision score per trial; compare with ``threshold``."""
        ns = self.normalizer.apply(np.atleast_2d(scores))
        if self.kind in ("sum", "eer_weighted_sum"):
            return fuse_sum(ns, self.weights)
        if self.kind == "linear_regression":
            return _sigmoid(self.bias + ns @ self.weights)
        return self.net.predict(ns)[:, 0].astype(np.float64)

    def decide(self, scores):
        return self.score(scores) >= self.threshold


def _sum_model(kind, norm, ns, y, weights, eers=None, seed=0):
    f = fuse_sum(ns, weights)
    slope, icpt = _fit_logistic_1d(f, y, seed)
    return FusionModel(kind, norm, None if weights is None else np.asarray(weights), eers=eers,
                       threshold=-icpt / slope)


def fit_sum(train, normalization="minmax", seed=0):
    _check_classes(train.labels)
    norm = fit_normalizer(train, normalization)
    ns = norm.apply(train.scores)
    return _sum_model("sum", norm, ns, train.labels, np.ones(train.n_matchers), seed=seed)


def fit_eer_weighted_sum(train, normalization="minmax", seed=0):
    _check_classes(train.labels)
    norm = fit_normalizer(train, normalization)
    ns = norm.apply(train.scores)
    eers = np.array([eer_details(ns[:, j], train.labels).eer for j in range(train.n_matchers)])
    return _sum_model("eer_weighted_sum", norm, ns, train.labels, eer_weights(eers), eers, seed)


def fit_regression(train, kind, normalization="none", seed=0):
    """Linear (least squares, sigmoid at decision time) or L2-penalized logistic fusion."""
    _check_classes(train.labels)
    norm = fit_normalizer(train, normalization)
    ns = norm.apply(train.scores)
    y = train.labels.astype(np.float64)
    if kind == "linear":
        design = np.column_stack([np.ones(len(ns)), ns])
        if np.linalg.matrix_rank(design) < design.shape[1]:
            raise DegenerateFit("singular design matrix")
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        # the fit targets {0, 1}, so 0.5 on the linear output is the class boundary
        return FusionModel("linear_regression", norm, coef[1:], float(coef[0]), threshold=float(_sigmoid(0.5)))
    if kind == "logistic":
        net = _fit_net(ns, y, [Dense(1, "sigmoid", l2=LOGISTIC_L2)], seed, 0.05, 1000)
        return FusionModel("logistic_regression", norm, net.params["0.dense.w"][:, 0].copy(),
                           float(net.params["0.dense.b"][0]), net=net)
    raise ValueError(f"unknown regression kind {kind!r}")


def fit_mlp_fusion(train, hidden=8, normalization="zscore", seed=0, steps=2000, lr=0.05):
    """One sigmoid hidden layer, sigmoid output, trained on BCE."""
    if hidden < 1:
        raise ValueError("hidden must be >= 1")
    _check_classes(train.labels)
    norm = fit_normalizer(train, normalization)
    ns = norm.apply(train.scores)
    net = _fit_net(ns, train.labels.astype(np.float64),
                   [Dense(hidden, "sigmoid"), Dense(1, "sigmoid")], seed, lr, steps)
    return FusionModel("mlp", norm, net=net)


def fit_fusion(train, method, normalization, seed=0):
    if method == "sum":
        return fit_sum(train, normalization, seed)
    if method == "eer_weighted_sum":
        return fit_eer_weighted_sum(train, normalization, seed)
    if method == "linear_regression":
        return fit_regression(train, "linear", normalization, seed)
    if method == "logistic_regression":
        return fit_regression(train, "logistic", normalization, seed)
    if method == "mlp":
        return fit_mlp_fusion(train, normalization=normalization, seed=seed)
    raise ValueError(f"unknown fusion method {method!r}")


# -- evaluation ------------------------------------------------------------------

def fusion_metrics(model, test):
    s = model.score(test.scores)
    c = ConfusionCounts.from_scores(s, test.labels, model.threshold)
    try:
        f1 = precision_recall_f1(c)[2]
    except UndefinedMetric:
        f1 = 0.0
    return {"f1": float(f1), "eer": float(eer_details(s, test.labels).eer)}


@dataclass
class FusionReport:
    rows: list    # best normalization per method
    table: list   # every (method, normalization) tried

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fusion", "normalization", "f1", "eer"])
            for r in self.rows:
                w.writerow([r["fusion"], r["normalization"], f"{r['f1']:.4f}", f"{r['eer']:.4f}"])

    def best(self):
        return min(self.rows, key=lambda r: (r["eer"], -r["f1"]))


def eval_fusion(train, test, methods=METHODS, normalizations=NORMALIZATIONS, seed=0):
    """Fit every method under every normalization on ``train``; keep the lowest-EER one on ``test``."""
    table, rows = [], []
    for method in methods:
        tried = []
        for norm in normalizations:
            try:
                model = fit_fusion(train, method, norm, seed)
            except (DegenerateColumn, DegenerateFit) as exc:
                table.append({"fusion": method, "normalization": norm, "error": str(exc)})
                continue
            r = {"fusion": method, "normalization": norm, **fusion_metrics(model, test),
                 "threshold": float(model.threshold)}
            table.append(r)
            tried.append(r)
        if tried:
            rows.append(min(tried, key=lambda r: (r["eer"], -r["f1"])))
    return FusionReport(rows, table)
