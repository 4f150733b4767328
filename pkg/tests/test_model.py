import itertools

import numpy as np
import pytest

from motionauth import binfmt
from motionauth import model as M
from motionauth.datapipe import Window
from motionauth.errors import (CorruptModelFile, IncompatibleModelFile, NoEnrollment,
                               NotCalibrated, ShapeError)
from motionauth.nncore import Adam
from motionauth.metriclearn import bce_grad


@pytest.fixture(scope="module")
def model1():
    m = M.new_model(1, seed=3)
    m.threshold = 0.276
    return m


def _windows(n, seconds=1, seed=0):
    return np.random.default_rng(seed).standard_normal((n, 9 * 200 * seconds)).astype(np.float32)


def _shapes(net, x):
    shapes = []
    for layer in net.layers:
        x = layer.forward(x, False, None)
        shapes.append(x.shape[1:])
    return shapes


@pytest.mark.parametrize("seconds, flat", [(1, 12_800), (3, 38_400), (5, 64_000)])
def test_embedding_shape_table(seconds, flat):
    w = 200 * seconds
    net = M.build_embedding_net(seconds)
    shapes = _shapes(net, np.zeros((2, w, 9), np.float32))
    assert shapes[0] == (w, 64) and shapes[3] == (w, 128) and shapes[6] == (w, 256)
    assert shapes[9] == (w // 4, 256)
    assert shapes[10] == (flat,)
    assert shapes[-1] == (32,)


def test_embed_unit_norm_and_deterministic(model1):
    x = _windows(5) * 10
    e = M.embed(model1, x)
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-5)
    np.testing.assert_array_equal(e, M.embed(model1, x))
    np.testing.assert_allclose(M.embed(model1, x[2]), e[2], atol=1e-5)


def test_embed_accepts_window_and_checks_shape(model1):
    x = _windows(1)[0]
    w = Window("u", "s", 0, x, 1)
    np.testing.assert_array_equal(M.embed(model1, w), M.embed(model1, x))
    with pytest.raises(ShapeError):
        M.embed(model1, np.zeros(9 * 600))
    with pytest.raises(ShapeError):
        M.embed(model1, Window("u", "s", 0, np.zeros(5400), 3))


def test_channel_subset_model_reads_its_channels():
    m = M.new_model(1, channels=(3, 4, 5), seed=1)
    x = _windows(2)
    y = x.copy()
    y[:, :600] += 5.0  # accelerometer only
    np.testing.assert_array_equal(M.embed(m, x), M.embed(m, y))


def test_distance_vector_examples():
    e1 = np.zeros(32)
    e1[0] = 1
    e2 = np.zeros(32)
    e2[1] = 1
    d = M.distance_vector(e1, e2)
    assert d.sum() == 2 and np.linalg.norm(d) == pytest.approx(np.sqrt(2))
    assert not M.distance_vector(e1, e1).any()
    np.testing.assert_array_equal(M.distance_vector(e1, e2), M.distance_vector(e2, e1))


def test_decide_range_and_shape(model1):
    d = np.abs(np.random.default_rng(0).standard_normal((100, 32)))
    p = M.decide(model1, d)
    assert ((p > 0) & (p < 1)).all()
    np.testing.assert_array_equal(p, M.decide(model1, d))
    with pytest.raises(ShapeError):
        M.decide(model1, np.zeros(16))


def test_trained_decision_net_prefers_small_distances():
    m = M.new_model(1, seed=0)
    rng = np.random.default_rng(0)
    opt = Adam(1e-2)
    for _ in range(150):
        y = rng.integers(0, 2, 64).astype(np.float32)
        d = np.abs(rng.normal(0, np.where(y[:, None] == 1, 0.05, 0.4), (64, 32))).astype(np.float32)
        p = m.decision.forward(d, train=True, rng=rng)[:, 0]
        m.decision.backward((bce_grad(p, y) / len(y))[:, None].astype(np.float32))
        opt.step(m.decision.params, m.decision.grads)
    assert M.decide(m, np.zeros(32)) > M.decide(m, np.full(32, 0.5))


class _FixedScores:
    """Stand-in decision net returning preset per-shot probabilities."""

    input_shape = (32,)

    def __init__(self, scores):
        self.scores = np.asarray(scores, dtype=np.float32)

    def predict(self, d, batch_size=None):
        return self.scores[:len(d), None]


@pytest.mark.parametrize("shots, threshold, score, accept", [
    ([0.9, 0.7, 0.8], 0.276, 0.8, True),
    ([0.3], 0.276, 0.3, True),
    ([0.1, 0.1, 0.1], 0.276, 0.1, False),
])
def test_verify_nshot_mean(model1, shots, threshold, score, accept):
    m = M.AuthModel(model1.embedding, _FixedScores(shots), 1, threshold=threshold)
    s, a = M.verify_nshot(m, _windows(1)[0], np.eye(32)[:len(shots)])
    assert s == pytest.approx(score) and a == accept


def test_verify_nshot_majority(model1):
    m = M.AuthModel(model1.embedding, _FixedScores([0.9, 0.2, 0.8]), 1, threshold=0.5)
    s, a = M.verify_nshot(m, _windows(1)[0], np.eye(32)[:3], aggregation="majority")
    assert s == pytest.approx(2 / 3) and a


def test_verify_nshot_errors(model1):
    with pytest.raises(NoEnrollment):
        M.verify_nshot(model1, _windows(1)[0], [])
    raw = M.new_model(1, seed=0)
    with pytest.raises(NotCalibrated):
        M.verify_nshot(raw, _windows(1)[0], np.eye(32)[:1])


def test_verify_nshot_permutation_invariant(model1):
    x = _windows(4, seed=2)
    enroll = M.embed(model1, x[1:])
    s0, _ = M.verify_nshot(model1, x[0], enroll)
    for perm in itertools.permutations(range(3)):
        s, _ = M.verify_nshot(model1, x[0], enroll[list(perm)])
        assert s == pytest.approx(s0, abs=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_accept_monotone_in_shot_scores(model1, seed):
    rng = np.random.default_rng(seed)
    shots = rng.uniform(0, 1, 3)
    m = M.AuthModel(model1.embedding, _FixedScores(shots), 1, threshold=0.5)
    _, a0 = M.verify_nshot(m, _windows(1)[0], np.eye(32)[:3])
    bumped = shots.copy()
    bumped[rng.integers(3)] += rng.uniform(0, 0.5)
    m2 = M.AuthModel(model1.embedding, _FixedScores(bumped), 1, threshold=0.5)
    _, a1 = M.verify_nshot(m2, _windows(1)[0], np.eye(32)[:3])
    assert a1 or not a0


def test_save_load_round_trip(model1, tmp_path):
    model1.metadata = {"seed": 3}
    M.save_model(model1, tmp_path / "m.bin")
    back = M.load_model(tmp_path / "m.bin")
    x = _windows(3)
    np.testing.assert_array_equal(M.embed(back, x), M.embed(model1, x))
    assert back.threshold == model1.threshold and back.metadata == {"seed": 3}
    assert back.embedding.params.digest() == model1.embedding.params.digest()
    assert (tmp_path / "m.bin").read_bytes() == M.model_bytes(back)


def test_load_truncated(model1, tmp_path):
    blob = M.model_bytes(model1)
    (tmp_path / "m.bin").write_bytes(blob[:-100])
    with pytest.raises(CorruptModelFile):
        M.load_model(tmp_path / "m.bin")


def test_load_future_version(model1, monkeypatch):
    monkeypatch.setattr(binfmt, "FORMAT_VERSION", binfmt.FORMAT_VERSION + 1)
    blob = M.model_bytes(model1)
    monkeypatch.undo()
    with pytest.raises(IncompatibleModelFile):
        M.model_from_bytes(blob)


def test_load_future_model_version(model1, monkeypatch):
    monkeypatch.setattr(M, "MODEL_FORMAT_VERSION", M.MODEL_FORMAT_VERSION + 1)
    blob = M.model_bytes(model1)
    monkeypatch.undo()
    with pytest.raises(IncompatibleModelFile):
        M.model_from_bytes(blob)
