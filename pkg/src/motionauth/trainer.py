"""Two-stage training, threshold calibration and grid search."""

import csv
import hashlib
import itertools
import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import metriclearn as ml
from .datapipe.splits import sample_pairs
from .datapipe.windows import MODALITIES
from .errors import (BadPairSet, DegenerateScores, EmptySearchSpace, NonFiniteLoss, NoValidTriplets,
                     TrainingStalled)
from .evalkit import eer_details
from .model import AuthModel, build_decision_net, build_embedding_net, decide, embed
from .nncore import make_optimizer

# hyperparameter lattices for grid_search
SIAMESE_LATTICE = {
    "optimizer": ["adam", "sgd"],
    "lr": [0.1, 0.05, 0.01, 0.005, 0.001, 0.0005],
    "batch_size": [64, 128, 256, 1024],
    "alpha": [1, 0.5, 0.3, 0.1, 0.05, 0.03, 0.01],
}
DECISION_LATTICE = {
    "optimizer": ["adam", "sgd"],
    "lr": [0.1, 0.05, 0.01, 0.005],
    "batch_size": [32, 64, 128],
}


@dataclass(frozen=True)
class SiameseTrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 100
    alpha: float = 0.03
    loss: str = "semi_hard_triplet"
    contrastive_margin: float = 1.0
    seed: int = 0
    channel_subset: str = "all"
    # windows drawn (seeded, without replacement) per epoch; None = whole pool
    windows_per_epoch: int = None
    # windows used to re-estimate batch-norm statistics after training
    bn_refresh_windows: int = 2048
    debug: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("semi_hard_triplet", "contrastive"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.channel_subset not in MODALITIES:
            raise ValueError(f"unknown channel subset {self.channel_subset!r}")

    @property
    def channels(self):
        return MODALITIES[self.channel_subset]


@dataclass(frozen=True)
class DecisionTrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 10
    n_train_pairs: int = 50_000
    n_test_pairs: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")


@dataclass
class TrainReport:
    loss_curve: list
    params_digest: str
    wall_time: float
    config: dict
    mining: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def write(self, json_path, csv_path=None):
        with open(json_path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        if csv_path:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["epoch", "loss"])
                for i, v in enumerate(self.loss_curve, start=1):
                    w.writerow([i, f"{v:.8f}"])


@dataclass(frozen=True)
class CalibrationResult:
    threshold: float
    eer: float
    far_at_t: float
    frr_at_t: float
    n_pairs: int

    def to_dict(self):
        return asdict(self)


def config_digest(*cfgs):
    blob = json.dumps([asdict(c) for c in cfgs], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _check_finite(value, what, epoch, step):
    if not np.isfinite(value):
        raise NonFiniteLoss(f"{what} became {value} at epoch {epoch}, step {step}")


def _batches(n, batch_size):
    """Consecutive slices; a trailing batch of one is folded into the previous one."""
    edges = list(range(0, n, batch_size)) + [n]
    if len(edges) > 2 and edges[-1] - edges[-2] < 2:
        edges.pop(-2)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def _user_codes(pool):
    return np.unique(pool.user_ids, return_inverse=True)[1]


def train_siamese(pool, cfg=SiameseTrainConfig(), return_net=False):
    """Stage one: fit the embedding net with online semi-hard triplet mining.

    Each epoch shuffles the pool (or a seeded draw of ``windows_per_epoch``
    windows), embeds each batch in training mode, mines triplets inside the
    batch and takes one optimizer step on the mean triplet loss plus the L2
    penalties. With ``loss="contrastive"`` each batch instead yields a
    balanced set of in-batch pairs scored by the contrastive loss.

    Returns ``(ParamSet, TrainReport)``, or ``(Sequential, TrainReport)``
    with ``return_net``.
    """
    start = time.perf_counter()
    if len(set(pool.user_ids.tolist())) < 2:
        raise TrainingStalled("training pool holds a single user; no triplet can be formed")
    net = build_embedding_net(pool.window_seconds, len(cfg.channels), seed=cfg.seed,
                              period_ms=pool.period_ms)
    net.debug = cfg.debug
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    codes = _user_codes(pool)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    tmining = ml.TripletConfig(alpha=cfg.alpha)
    curve, per_epoch = [], []
    totals = {"pairs": 0, "semi_hard": 0, "fallback": 0, "skipped": 0, "triplets": 0,
              "batches": 0, "stalled_batches": 0}
    for epoch in range(1, cfg.epochs + 1):
        if cfg.windows_per_epoch and cfg.windows_per_epoch < len(pool):
            order = rng.choice(len(pool), cfg.windows_per_epoch, replace=False)
        else:
            order = rng.permutation(len(pool))
        losses, stalled = [], 0
        ep = {"pairs": 0, "semi_hard": 0, "fallback": 0, "skipped": 0, "triplets": 0}
        batches = _batches(len(order), cfg.batch_size)
        for step, sl in enumerate(batches):
            idx = order[sl]
            x = pool.tensor(cfg.channels, idx)
            labels = codes[idx]
            emb = net.forward(x, train=True, rng=rng)
            try:
                if cfg.loss == "semi_hard_triplet":
                    trip, stats = ml.mine_semihard(emb, labels, tmining, rng)
                    loss, g = ml.batch_triplet_loss(emb, trip, cfg.alpha)
                    for k in ("pairs", "semi_hard", "fallback", "skipped"):
                        ep[k] += getattr(stats, k)
                    ep["triplets"] += len(trip)
                else:
                    a, b, y = _inbatch_pairs(labels, rng)
                    loss, g = ml.batch_contrastive_loss(emb, a, b, y, cfg.contrastive_margin)
            except NoValidTriplets as exc:
                if exc.stats is None:
                    stalled += 1
                    continue
                # every triplet already satisfies the margin: zero triplet loss, no step
                for k in ("pairs", "semi_hard", "fallback", "skipped"):
                    ep[k] += getattr(exc.stats, k)
                losses.append(net.penalty())
                continue
            net.backward(g.astype(np.float32))
            total = loss + net.penalty()
            _check_finite(total, "training loss", epoch, step)
            opt.step(net.params, net.grads)
            losses.append(total)
        if not losses:
            raise TrainingStalled(f"epoch {epoch}: no batch produced a valid triplet or pair")
        curve.append(float(np.mean(losses)))
        per_epoch.append(dict(ep, batches=len(batches), stalled_batches=stalled))
        for k in ep:
            totals[k] += ep[k]
        totals["batches"] += len(batches)
        totals["stalled_batches"] += stalled

    if cfg.bn_refresh_windows:
        sub = rng.permutation(len(pool))[:cfg.bn_refresh_windows]
        net.refresh_batchnorm(pool.tensor(cfg.channels, sub[sl]) for sl in _batches(len(sub), cfg.batch_size))

    pairs = max(totals["pairs"], 1)
    mining = {
        "triplets_per_batch": totals["triplets"] / max(totals["batches"] - totals["stalled_batches"], 1),
        "semi_hard_rate": totals["semi_hard"] / pairs,
        "fallback_rate": totals["fallback"] / pairs,
        "skip_rate": totals["skipped"] / pairs,
        "stalled_batches": totals["stalled_batches"],
        "per_epoch": per_epoch,
    }
    report = TrainReport(curve, net.params.digest(), time.perf_counter() - start, asdict(cfg), mining)
    return (net if return_net else net.params), report


def _inbatch_pairs(labels, rng):
    """Balanced same/different index pairs within one batch."""
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    pos = np.argwhere(np.triu(same, 1))
    neg = np.argwhere(np.triu(~same, 1))
    if len(pos) == 0 or len(neg) == 0:
        raise NoValidTriplets("batch has no positive or no negative pair")
    k = n // 2
    p = pos[rng.integers(0, len(pos), k)]
    q = neg[rng.integers(0, len(neg), n - k)]
    both = np.concatenate([p, q])
    y = np.r_[np.ones(k), np.zeros(n - k)]
    return both[:, 0], both[:, 1], y


def pair_distances(net, pairs, channels, batch_size=256):
    """``|e_a - e_b|`` for every pair, embedding each distinct window once."""
    pool = pairs.pool
    used, inv = np.unique(np.concatenate([pairs.a, pairs.b]), return_inverse=True)
    emb = net.predict(pool.tensor(channels, used), batch_size)
    ea, eb = emb[inv[:len(pairs.a)]], emb[inv[len(pairs.a):]]
    return np.abs(ea - eb).astype(np.float32)


def _check_pairs(pairs):
    pos = int(pairs.labels.sum())
    neg = len(pairs.labels) - pos
    if abs(pos - neg) > 1:
        raise BadPairSet(f"pair set is unbalanced: {pos} positive vs {neg} negative")


def train_decision(embedding_net, pairs, cfg=DecisionTrainConfig(), channels=None, test_pairs=None,
                   return_net=False):
    """Stage two: fit the decision net on distance vectors of a frozen embedding net.

    Raises ``AssertionError`` if the embedding parameters change.
    """
    start = time.perf_counter()
    _check_pairs(pairs)
    channels = tuple(range(embedding_net.input_shape[1])) if channels is None else tuple(channels)
    before = embedding_net.params.digest()
    d = pair_distances(embedding_net, pairs, channels)
    y = pairs.labels.astype(np.float32)
    net = build_decision_net(seed=cfg.seed + 1)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(y))
        losses = []
        for step, sl in enumerate(_batches(len(order), cfg.batch_size)):
            idx = order[sl]
            p = net.forward(d[idx], train=True, rng=rng)[:, 0]
            loss = float(ml.bce_loss(p, y[idx]).mean()) + net.penalty()
            _check_finite(loss, "decision loss", epoch, step)
            g = (ml.bce_grad(p, y[idx]) / len(idx)).astype(np.float32)[:, None]
            net.backward(g)
            opt.step(net.params, net.grads)
            losses.append(loss)
        curve.append(float(np.mean(losses)))
    # running averages lag behind fast-moving weights; use the final weights' batch moments
    net.refresh_batchnorm(d[sl] for sl in _batches(len(d), cfg.batch_size))
    after = embedding_net.params.digest()
    assert before == after, "embedding parameters changed during decision training"
    extra = {"embedding_digest": after,
             "train_accuracy": float(((net.predict(d)[:, 0] >= 0.5) == (y == 1)).mean())}
    if test_pairs is not None:
        dt = pair_distances(embedding_net, test_pairs, channels)
        extra["test_accuracy"] = float(((net.predict(dt)[:, 0] >= 0.5) == (test_pairs.labels == 1)).mean())
    report = TrainReport(curve, net.params.digest(), time.perf_counter() - start, asdict(cfg), {}, extra)
    return (net if return_net else net.params), report


def pair_scores(model, pairs):
    """Decision probabilities for every pair of a PairSet."""
    return decide(model, pair_distances(model.embedding, pairs, model.channels))


def calibrate_threshold(model, pairs):
    """Set ``model.threshold`` to the EER point of the validation pairs."""
    scores = pair_scores(model, pairs)
    if np.ptp(scores) == 0:
        raise DegenerateScores(f"all {len(scores)} validation scores equal {scores[0]:.6g}")
    r = eer_details(scores, pairs.labels)
    model.threshold = r.threshold
    model.metadata["validation_eer"] = r.eer
    return CalibrationResult(r.threshold, r.eer, r.far_at_t, r.frr_at_t, len(scores))


def train_model(train_pool, val_pool, siamese_cfg=SiameseTrainConfig(), decision_cfg=DecisionTrainConfig(),
                n_val_pairs=None, modality=None):
    """Both stages plus calibration; returns ``(AuthModel, reports)``."""
    emb_net, srep = train_siamese(train_pool, siamese_cfg, return_net=True)
    pairs = sample_pairs(train_pool, decision_cfg.n_train_pairs, decision_cfg.seed)
    dec_net, drep = train_decision(emb_net, pairs, decision_cfg, siamese_cfg.channels, return_net=True)
    model = AuthModel(emb_net, dec_net, train_pool.window_seconds, siamese_cfg.channels,
                      period_ms=train_pool.period_ms,
                      metadata={"seeds": {"siamese": siamese_cfg.seed, "decision": decision_cfg.seed},
                                "config_digest": config_digest(siamese_cfg, decision_cfg),
                                "modality": modality or siamese_cfg.channel_subset,
                                "loss": siamese_cfg.loss})
    val_pairs = sample_pairs(val_pool, n_val_pairs or decision_cfg.n_test_pairs, decision_cfg.seed + 1)
    cal = calibrate_threshold(model, val_pairs)
    return model, {"siamese": srep, "decision": drep, "calibration": cal}


def train_single_modality(train_pool, val_pool, sensor_kind, siamese_cfg=SiameseTrainConfig(),
                          decision_cfg=DecisionTrainConfig(), **kw):
    """Two-stage pipeline restricted to the three axes of one sensor."""
    kind = getattr(sensor_kind, "value", sensor_kind)
    if kind not in MODALITIES or kind == "all":
        raise ValueError(f"not a single sensor: {sensor_kind!r}")
    return train_model(train_pool, val_pool, replace(siamese_cfg, channel_subset=kind), decision_cfg,
                       modality=kind, **kw)


# -- grid search ----------------------------------------------------------------

@dataclass
class GridSearchResult:
    best: dict
    best_score: float
    table: list   # [{**point, "score": f1}]

    def write_csv(self, path):
        keys = sorted({k for row in self.table for k in row})
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
            w.writeheader()
            w.writerows(self.table)


def expand_lattice(space):
    """Cartesian product of a ``{name: [values]}`` mapping, in a stable order."""
    if isinstance(space, dict):
        names = list(space)
        return [dict(zip(names, vals)) for vals in itertools.product(*(space[n] for n in names))]
    return [dict(p) for p in space]


def grid_search(space, objective):
    """Evaluate ``objective(point) -> validation F1`` for every lattice point.

    The winner maximizes the objective; ties go to the lower learning rate,
    then to the smaller batch size.
    """
    points = expand_lattice(space)
    if not points:
        raise EmptySearchSpace("search space has no points")
    table = []
    for point in points:
        score = float(objective(point))
        table.append(dict(point, score=score))

    def rank(row):
        return (-row["score"], row.get("lr", 0.0), row.get("batch_size", 0))

    best = min(table, key=rank)
    return GridSearchResult({k: v for k, v in best.items() if k != "score"}, best["score"], table)


def f1_objective(train_pool, val_pool, base_siamese=SiameseTrainConfig(), base_decision=DecisionTrainConfig(),
                 stage="siamese", n_val_pairs=2000):
    """Objective for :func:`grid_search`: train with the point's overrides, return validation F1."""
    from .evalkit import summarize

    def objective(point):
        s_cfg, d_cfg = base_siamese, base_decision
        if stage == "siamese":
            s_cfg = replace(s_cfg, **point)
        else:
            d_cfg = replace(d_cfg, **point)
        model, _ = train_model(train_pool, val_pool, s_cfg, d_cfg, n_val_pairs=n_val_pairs)
        pairs = sample_pairs(val_pool, n_val_pairs, d_cfg.seed + 1)
        return summarize(pair_scores(model, pairs), pairs.labels, model.threshold)["f1"]

    return objective
