import numpy as np
import pytest

from gradcheck import LAYER_CHECKS, numeric_grad, rel_error
from motionauth.errors import DegenerateBatch, MisalignedGrads, ShapeError
from motionauth.nncore import (
    BatchNorm,
    Conv1D,
    Dense,
    Dropout,
    Flatten,
    L2Normalize,
    MaxPool1D,
    ParamSet,
    ReLU,
    Sequential,
    adam_step,
    load_params,
    save_params,
    sgd_step,
)
from motionauth.nncore import functional as F


def conv_reference(x, w, b):
    """Nested-loop 'same' cross-correlation."""
    bsz, length, c_in = x.shape
    k, _, c_out = w.shape
    pad = (k - 1) // 2
    y = np.zeros((bsz, length, c_out))
    for bi in range(bsz):
        for i in range(length):
            for o in range(c_out):
                acc = b[o]
                for kk in range(k):
                    src = i + kk - pad
                    if 0 <= src < length:
                        for c in range(c_in):
                            acc += w[kk, c, o] * x[bi, src, c]
                y[bi, i, o] = acc
    return y


# -- conv1d ------------------------------------------------------------------

def test_conv1d_hand_example():
    x = np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1)
    w = np.array([1.0, 0.0, -1.0]).reshape(3, 1, 1)
    y = F.conv1d_forward(x, w, np.zeros(1))
    np.testing.assert_allclose(y.ravel(), [-2.0, -2.0, 2.0])


def test_conv1d_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 6, 3))
    w = np.zeros((5, 3, 3))
    w[2] = np.eye(3)
    np.testing.assert_allclose(F.conv1d_forward(x, w, np.zeros(3)), x)


@pytest.mark.parametrize("seed", range(5))
def test_conv1d_matches_loop_reference(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 11, 4)).astype(np.float32)
    w = rng.standard_normal((5, 4, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    np.testing.assert_allclose(F.conv1d_forward(x, w, b), conv_reference(x, w, b), atol=1e-5)


def test_conv1d_zero_grad_out_gives_zero_grads():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 5, 2))
    w = rng.standard_normal((3, 2, 4))
    gx, gw, gb = F.conv1d_backward(np.zeros((2, 5, 4)), x, w)
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv1d_single_element_derivative():
    x = np.array([[[2.0]]])
    w = np.array([[[3.0]]])
    gx, gw, gb = F.conv1d_backward(np.ones((1, 1, 1)), x, w)
    assert gx.item() == 3.0 and gw.item() == 2.0 and gb.item() == 1.0


def test_conv1d_l2_term_added_to_weight_grad():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 4, 2))
    w = rng.standard_normal((3, 2, 2))
    g = rng.standard_normal((1, 4, 2))
    _, gw0, _ = F.conv1d_backward(g, x, w, 0.0)
    _, gw1, _ = F.conv1d_backward(g, x, w, 0.01)
    np.testing.assert_allclose(gw1 - gw0, 2 * 0.01 * w)


def test_conv1d_shape_errors():
    with pytest.raises(ShapeError):
        F.conv1d_forward(np.zeros((1, 4, 2)), np.zeros((3, 3, 1)), np.zeros(1))
    with pytest.raises(ShapeError):
        F.conv1d_forward(np.zeros((1, 4, 2)), np.zeros((4, 2, 1)), np.zeros(1))


# -- batch norm --------------------------------------------------------------

def test_batchnorm_standardizes():
    x = np.array([[1.0], [2.0], [3.0]])
    y, _ = F.batchnorm_forward(x, np.ones(1), np.zeros(1), np.zeros(1), np.ones(1),
                               epsilon=1e-12, train=True)
    np.testing.assert_allclose(y.ravel(), [-1.2247449, 0.0, 1.2247449], atol=1e-6)


def test_batchnorm_inverse_transform():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((16, 3)) * 4 + 2
    gamma, beta = x.std(axis=0), x.mean(axis=0)
    y, _ = F.batchnorm_forward(x, gamma, beta, np.zeros(3), np.ones(3), epsilon=1e-12)
    np.testing.assert_allclose(y, x, atol=1e-9)


def test_batchnorm_running_stats_and_infer_mode():
    x = np.array([[1.0], [3.0]])
    rm, rv = np.zeros(1), np.ones(1)
    F.batchnorm_forward(x, np.ones(1), np.zeros(1), rm, rv, momentum=0.9, train=True)
    np.testing.assert_allclose(rm, [0.2])
    np.testing.assert_allclose(rv, [0.9 + 0.1 * 1.0])
    y, _ = F.batchnorm_forward(np.array([[0.2]]), np.ones(1), np.zeros(1), rm, rv,
                               epsilon=0.0, train=False)
    np.testing.assert_allclose(y, [[0.0]], atol=1e-12)


def test_batchnorm_rejects_single_sample_batch():
    with pytest.raises(DegenerateBatch):
        F.batchnorm_forward(np.ones((1, 4)), np.ones(4), np.zeros(4), np.zeros(4), np.ones(4))


# -- pooling -----------------------------------------------------------------

def test_maxpool_hand_example_and_routing():
    x = np.array([1, 3, 2, 5, 4, 0, 1, 2], dtype=float).reshape(1, 8, 1)
    y, idx = F.maxpool1d_forward(x, 4)
    np.testing.assert_array_equal(y.ravel(), [5, 4])
    gx = F.maxpool1d_backward(np.ones((1, 2, 1)), idx, x.shape, 4)
    np.testing.assert_array_equal(gx.ravel(), [0, 0, 0, 1, 1, 0, 0, 0])


def test_maxpool_constant_and_remainder():
    y, _ = F.maxpool1d_forward(np.full((1, 9, 2), 7.0), 4)
    assert y.shape == (1, 2, 2) and (y == 7.0).all()
    with pytest.raises(ShapeError):
        F.maxpool1d_forward(np.zeros((1, 3, 1)), 4)


# -- dense, activations ------------------------------------------------------

def test_dense_identity():
    x = np.array([[1.0, -2.0, 3.0]])
    y, _ = F.dense_forward(x, np.eye(3), np.zeros(3), "none")
    np.testing.assert_array_equal(y, x)


def test_relu_definition():
    np.testing.assert_array_equal(F.relu(np.array([-1.0, 2.0])), [0.0, 2.0])


def test_sigmoid_is_stable_at_extremes():
    s = F.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_allclose(s, [0.0, 0.5, 1.0])
    assert np.all(np.isfinite(s))


def test_dense_shape_error():
    with pytest.raises(ShapeError):
        F.dense_forward(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))


# -- l2 normalize ------------------------------------------------------------

def test_l2_normalize_examples():
    y, _ = F.l2_normalize_forward(np.array([[3.0, 4.0]]))
    np.testing.assert_allclose(y, [[0.6, 0.8]])
    u = np.array([[0.0, 1.0, 0.0]])
    np.testing.assert_array_equal(F.l2_normalize_forward(u)[0], u)


def test_l2_normalize_zero_vector_is_guarded():
    y, _ = F.l2_normalize_forward(np.zeros((1, 4)))
    assert np.all(np.isfinite(y))


# -- dropout -----------------------------------------------------------------

def test_dropout_identity_cases():
    x = np.arange(10.0)
    np.testing.assert_array_equal(F.dropout(x, 0.0, train=True), x)
    np.testing.assert_array_equal(F.dropout(x, 0.25, train=False), x)


def test_dropout_keep_fraction():
    y = F.dropout(np.ones(100_000), 0.25, train=True, seed=7)
    kept = (y != 0).mean()
    assert abs(kept - 0.75) < 0.01
    np.testing.assert_allclose(y[y != 0], 1 / 0.75)


# -- finite-difference gradient checks ----------------------------------------

@pytest.mark.parametrize("layer", sorted(k for k in LAYER_CHECKS if "loss" not in k))
def test_layer_gradients_match_finite_differences(layer):
    worst = max(LAYER_CHECKS[layer](seed) for seed in range(20))
    assert worst < 1e-4


def _toy_net(seed=0):
    return Sequential([Conv1D(3, 3, l2=1e-3), BatchNorm(), ReLU(), MaxPool1D(2), Flatten(),
                       Dense(4, "sigmoid", l2=1e-3), Dense(2), L2Normalize()],
                      (6, 2), seed=seed, dtype=np.float64)


def test_sequential_backward_matches_finite_differences():
    net = _toy_net()
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 6, 2))
    r = rng.standard_normal((4, 2))

    def loss_of_x(v):
        return float((net.forward(v, train=True) * r).sum())

    net.forward(x, train=True)
    gx = net.backward(r)
    assert rel_error(gx, numeric_grad(loss_of_x, x.copy())) < 1e-4

    w = net.params["0.conv1d.w"]
    net.forward(x, train=True)
    net.backward(r)
    gw = net.grads["0.conv1d.w"] - 2 * 1e-3 * w

    def loss_of_w(v):
        return float((net.forward(x, train=True) * r).sum())

    assert rel_error(gw, numeric_grad(loss_of_w, w)) < 1e-4


def test_two_layer_jacobian_vector_product():
    net = Sequential([Dense(5, "relu"), Dense(3, "sigmoid")], (4,), seed=2, dtype=np.float64)
    rng = np.random.default_rng(9)
    x = rng.standard_normal((1, 4))
    v = rng.standard_normal((1, 4))
    h = 1e-6
    jvp_fd = (net.forward(x + h * v) - net.forward(x - h * v)) / (2 * h)
    # J v via the transposed product: (J v)_k = <grad_x y_k, v>
    jvp = np.zeros(3)
    for k in range(3):
        e = np.zeros((1, 3))
        e[0, k] = 1.0
        net.forward(x)
        jvp[k] = (net.backward(e) * v).sum()
    np.testing.assert_allclose(jvp, jvp_fd.ravel(), rtol=1e-6, atol=1e-9)


def test_l2_penalty_is_reported_exactly():
    net = _toy_net()
    expected = 1e-3 * ((net.params["0.conv1d.w"] ** 2).sum() + (net.params["5.dense.w"] ** 2).sum())
    assert net.penalty() == pytest.approx(expected, rel=1e-12)


def test_forward_is_deterministic():
    a, b = _toy_net(seed=4), _toy_net(seed=4)
    x = np.random.default_rng(0).standard_normal((3, 6, 2))
    np.testing.assert_array_equal(a.forward(x, train=True), b.forward(x, train=True))
    assert a.params.digest() == b.params.digest()


def test_sequential_rejects_wrong_input_shape():
    with pytest.raises(ShapeError):
        _toy_net().forward(np.zeros((2, 5, 2)))


def test_refresh_batchnorm_uses_batch_moments():
    net = Sequential([BatchNorm()], (2,), dtype=np.float64)
    data = np.array([[0.0, 1.0], [2.0, 3.0], [4.0, 5.0], [6.0, 7.0]])
    net.refresh_batchnorm([data[:2], data[2:]])
    np.testing.assert_allclose(net.params["0.batchnorm.running_mean"], [3.0, 4.0])
    np.testing.assert_allclose(net.params["0.batchnorm.running_var"], [1.0, 1.0])


def test_dropout_layer_only_active_in_training():
    net = Sequential([Dropout(0.5)], (1000,))
    x = np.ones((1, 1000), dtype=np.float32)
    np.testing.assert_array_equal(net.forward(x), x)
    y = net.forward(x, train=True, rng=np.random.default_rng(0))
    assert 0.4 < (y > 0).mean() < 0.6


# -- optimizers --------------------------------------------------------------

def _scalar_params(w0=1.0):
    p = ParamSet()
    p.add("w", np.array([w0]))
    return p


@pytest.mark.parametrize("g", [0.5, -3.0, 1e-3])
def test_adam_first_step_is_lr_times_sign(g):
    p = _scalar_params()
    adam_step(p, {"w": np.array([g])}, lr=0.01)
    assert p["w"][0] - 1.0 == pytest.approx(-0.01 * np.sign(g), rel=1e-3)


def test_zero_grads_leave_params_unchanged():
    p = _scalar_params()
    adam_step(p, {"w": np.array([0.0])}, lr=0.1)
    sgd_step(p, {"w": np.array([0.0])}, lr=0.1)
    assert p["w"][0] == 1.0


def test_adam_minimizes_square():
    p = _scalar_params()
    for _ in range(100):
        adam_step(p, {"w": 2 * p["w"]}, lr=0.1)
    assert abs(p["w"][0]) < 0.1


def test_sgd_step_value_and_direction():
    p = _scalar_params()
    sgd_step(p, {"w": np.array([1.0])}, lr=0.1)
    assert p["w"][0] == pytest.approx(0.9)
    q = _scalar_params()
    adam_step(q, {"w": np.array([1.0])}, lr=0.1)
    assert np.sign(p["w"][0] - 1) == np.sign(q["w"][0] - 1)


def test_misaligned_grads():
    p = _scalar_params()
    with pytest.raises(MisalignedGrads):
        adam_step(p, {"v": np.array([1.0])}, lr=0.1)
    with pytest.raises(MisalignedGrads):
        sgd_step(p, {"w": np.zeros(2)}, lr=0.1)


# -- parameter files ---------------------------------------------------------

def test_param_file_round_trip(tmp_path):
    net = _toy_net()
    path = tmp_path / "p.bin"
    save_params(path, net.params, metadata={"note": "x"})
    loaded, meta = load_params(path)
    assert meta == {"note": "x"}
    assert loaded.digest() == net.params.digest()
    assert loaded.trainable == net.params.trainable
    clone = Sequential(net.specs, net.input_shape, params=loaded)
    x = np.random.default_rng(1).standard_normal((2, 6, 2))
    np.testing.assert_array_equal(clone.forward(x), net.forward(x))
