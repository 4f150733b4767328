"""Triplet/contrastive losses, batch distances and online semi-hard mining."""

import enum
from dataclasses import dataclass

import numpy as np

from .errors import NoValidTriplets

BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class TripletConfig:
    alpha: float = 0.03
    mining: str = "semi_hard"
    fallback: str = "easiest_hard_negative"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.mining != "semi_hard":
            raise ValueError(f"unsupported mining strategy {self.mining!r}")
        if self.fallback != "easiest_hard_negative":
            raise ValueError(f"unsupported fallback {self.fallback!r}")


class TripletCategory(str, enum.Enum):
    EASY = "easy"
    SEMI_HARD = "semi_hard"
    HARD = "hard"


@dataclass
class TripletIndices:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    fallback: np.ndarray  # True where the negative came from the hard-negative fallback

    def __len__(self):
        return len(self.anchor)

    def __iter__(self):
        return iter(zip(self.anchor.tolist(), self.positive.tolist(), self.negative.tolist()))


@dataclass
class MiningStats:
    pairs: int
    semi_hard: int
    fallback: int
    skipped: int

    @property
    def semi_hard_rate(self):
        return self.semi_hard / self.pairs if self.pairs else 0.0

    @property
    def fallback_rate(self):
        return self.fallback / self.pairs if self.pairs else 0.0

    @property
    def skip_rate(self):
        return self.skipped / self.pairs if self.pairs else 0.0


def pairwise_sq_distances(emb):
    """``D[i, j] = ||e_i - e_j||^2``, symmetric, zero diagonal, clamped at 0."""
    emb = np.asarray(emb)
    sq = (emb * emb).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (emb @ emb.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def triplet_loss(d_ap_sq, d_an_sq, alpha):
    return max(d_ap_sq - d_an_sq + alpha, 0.0)


def categorize_triplet(d_ap_sq, d_an_sq, alpha):
    if d_ap_sq + alpha <= d_an_sq:
        return TripletCategory.EASY
    if d_an_sq <= d_ap_sq:
        return TripletCategory.HARD
    return TripletCategory.SEMI_HARD


def _label_codes(labels):
    _, codes = np.unique(np.asarray(labels), return_inverse=True)
    return codes.ravel()


def mine_semihard(emb, labels, cfg=TripletConfig(), rng=None):
    """Pick one negative for every ordered same-label (anchor, positive) pair.

    The negative is drawn uniformly among semi-hard candidates
    (``d_ap < d_an < d_ap + alpha`` on squared distances). Without any, the
    hard negative with the largest ``d_an`` is used and flagged as fallback;
    pairs whose negatives are all easy are skipped.

    Returns ``(TripletIndices, MiningStats)``.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    codes = _label_codes(labels)
    n = len(codes)
    same = codes[:, None] == codes[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    a_idx, p_idx = np.nonzero(pos_mask)
    if len(a_idx) == 0 or same.all():
        raise NoValidTriplets("batch has no anchor-positive pair with a negative available")

    d = pairwise_sq_distances(emb)
    d_ap = d[a_idx, p_idx][:, None]
    d_an = d[a_idx]
    neg = ~same[a_idx]
    semi = neg & (d_an > d_ap) & (d_an < d_ap + cfg.alpha)
    hard = neg & (d_an <= d_ap)

    has_semi = semi.any(axis=1)
    has_hard = hard.any(axis=1)
    keys = rng.random(semi.shape)
    keys[~semi] = -1.0
    semi_choice = keys.argmax(axis=1)
    hard_choice = np.where(hard, d_an, -np.inf).argmax(axis=1)

    use_fallback = ~has_semi & has_hard
    keep = has_semi | use_fallback
    stats = MiningStats(pairs=len(a_idx), semi_hard=int(has_semi.sum()),
                        fallback=int(use_fallback.sum()), skipped=int((~keep).sum()))
    if not keep.any():
        raise NoValidTriplets("every anchor-positive pair has only easy negatives", stats)
    negative = np.where(has_semi, semi_choice, hard_choice)
    triplets = TripletIndices(
        anchor=a_idx[keep], positive=p_idx[keep], negative=negative[keep],
        fallback=use_fallback[keep])
    return triplets, stats


def batch_triplet_loss(emb, triplets, alpha):
    """Mean hinge triplet loss over ``triplets`` and its gradient w.r.t. ``emb``."""
    a, p, n = triplets.anchor, triplets.positive, triplets.negative
    diff_ap = emb[a] - emb[p]
    diff_an = emb[a] - emb[n]
    d_ap = (diff_ap * diff_ap).sum(axis=1)
    d_an = (diff_an * diff_an).sum(axis=1)
    margin = d_ap - d_an + alpha
    active = (margin > 0).astype(emb.dtype)[:, None]
    t = max(len(a), 1)
    loss = float(np.maximum(margin, 0).sum() / t)
    grad = np.zeros_like(emb)
    g_ap = 2.0 * diff_ap * active / t
    g_an = 2.0 * diff_an * active / t
    np.add.at(grad, a, g_ap - g_an)
    np.add.at(grad, p, -g_ap)
    np.add.at(grad, n, g_an)
    return loss, grad


def contrastive_loss(y, dist, margin):
    """``Y * D^2 + (1 - Y) * max(margin - D, 0)^2`` on an unsquared distance."""
    return y * dist ** 2 + (1 - y) * max(margin - dist, 0.0) ** 2


def batch_contrastive_loss(emb, a, b, y, margin):
    """Mean contrastive loss over index pairs ``(a, b)`` with labels ``y``."""
    diff = emb[a] - emb[b]
    dist = np.sqrt((diff * diff).sum(axis=1))
    y = np.asarray(y, dtype=emb.dtype)
    hinge = np.maximum(margin - dist, 0.0)
    per = y * dist ** 2 + (1 - y) * hinge ** 2
    m = max(len(a), 1)
    # d(D^2)/d diff = 2 diff ; d(hinge^2)/d diff = -2 hinge * diff / D
    safe = np.maximum(dist, 1e-12)
    coef = (2.0 * y - (1 - y) * 2.0 * hinge / safe) / m
    g = diff * coef[:, None]
    grad = np.zeros_like(emb)
    np.add.at(grad, a, g)
    np.add.at(grad, b, -g)
    return float(per.sum() / m), grad


def bce_loss(p, y):
    """Elementwise binary cross-entropy with ``p`` clamped to [1e-7, 1 - 1e-7]."""
    pc = np.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)
    return -(y * np.log(pc) + (1 - y) * np.log(1 - pc))


def bce_grad(p, y):
    """Derivative of :func:`bce_loss` w.r.t. ``p`` (zero where the clamp is active)."""
    p = np.asarray(p)
    pc = np.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)
    g = -(y / pc - (1 - y) / (1 - pc))
    return np.where(pc == p, g, 0.0).astype(p.dtype)
