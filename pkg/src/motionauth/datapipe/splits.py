from dataclasses import dataclass

import numpy as np

from ..errors import BadSplitCounts, InsufficientUsers


@dataclass(frozen=True)
class UserSplit:
    train_users: tuple
    validation_users: tuple
    test_users: tuple
    seed: int

    def to_dict(self):
        return {"train": list(self.train_users), "validation": list(self.validation_users),
                "test": list(self.test_users), "seed": self.seed}


def split_users(user_ids, seed, counts=(35, 3, 7)):
    users = sorted(set(user_ids))
    if any(c < 0 for c in counts) or sum(counts) != len(users):
        raise BadSplitCounts(f"{len(users)} users cannot be split as {tuple(counts)}")
    perm = [users[i] for i in np.random.default_rng(seed).permutation(len(users))]
    a, b = counts[0], counts[0] + counts[1]
    return UserSplit(tuple(sorted(perm[:a])), tuple(sorted(perm[a:b])),
                     tuple(sorted(perm[b:])), seed)


@dataclass
class PairSet:
    """Index pairs into ``pool``; ``labels[i]`` is 1 for same-user pairs."""

    pool: object
    a: np.ndarray
    b: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    @property
    def positive_fraction(self):
        return float(self.labels.mean()) if len(self.labels) else 0.0

    def __iter__(self):
        for i, j, y in zip(self.a, self.b, self.labels):
            yield self.pool[int(i)], self.pool[int(j)], int(y)


def sample_pairs(pool, n_pairs, seed):
    """Balanced same-user / different-user pairs, uniform over windows.

    Positives take a uniform anchor among users that have at least two
    windows and a uniform partner from the same user. Negatives take a
    uniform anchor and a uniform partner from any other user.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    codes, inverse = np.unique(pool.user_ids, return_inverse=True)
    if len(codes) < 2:
        raise InsufficientUsers(f"pool has {len(codes)} user(s); need at least 2")
    counts = np.bincount(inverse)
    if counts.max() < 2:
        raise InsufficientUsers("no user has two windows to form a positive pair")
    order = np.argsort(inverse, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order)) - starts[inverse[order]]
    rng = np.random.default_rng(seed)
    n_pos = n_pairs // 2
    n_neg = n_pairs - n_pos

    eligible = np.nonzero(counts[inverse] >= 2)[0]
    pa = eligible[rng.integers(0, len(eligible), n_pos)]
    u = inverse[pa]
    r = rng.integers(0, counts[u] - 1)
    r = r + (r >= rank[pa])
    pb = order[starts[u] + r]

    na = rng.integers(0, len(order), n_neg)
    u = inverse[na]
    k = rng.integers(0, len(order) - counts[u])
    k = k + np.where(k >= starts[u], counts[u], 0)
    nb = order[k]

    a = np.concatenate([pa, na])
    b = np.concatenate([pb, nb])
    labels = np.concatenate([np.ones(n_pos, np.int8), np.zeros(n_neg, np.int8)])
    perm = rng.permutation(n_pairs)
    return PairSet(pool, a[perm], b[perm], labels[perm])
