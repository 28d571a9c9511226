import numpy as np
import pytest

from lnpt import diagnostics as G
from lnpt import model as M
from lnpt import pruning as P
from lnpt.errors import ConfigError


def linear_neuron(w=1.5, b=0.0):
    """Single dense layer: logits = w*x + b, K=1."""
    spec = M.ModelSpec((M.Dense(1, 1),), (1,), 1)
    params = M.Parameters(spec)
    params.view("layer0.weight")[...] = w
    params.view("layer0.bias")[...] = b
    return params


# --- weight distance --------------------------------------------------------

def test_weight_distance_zero_when_equal():
    params = M.init_params(M.preset("mlp-tiny", (3,), 2), seed=0)
    assert G.weight_distance(params.flat.copy(), params) == 0.0


def test_weight_distance_direct():
    spec = M.ModelSpec((M.Dense(1, 2),), (1,), 2)
    student = M.Parameters(spec)  # zeros
    ref = np.zeros(student.count)
    ref[0], ref[1] = 1.0, 2.0
    assert G.weight_distance(ref, student) == 5.0


def test_weight_distance_masked_entry_counts_teacher_square():
    spec = M.ModelSpec((M.Dense(1, 2), M.Dense(2, 2)), (1,), 2)
    student = M.Parameters(spec)
    student.flat[:] = 9.99  # arbitrary values everywhere
    ref = np.zeros(student.count)
    ref[1] = 2.0
    mask = P.PruneMask(flat=np.zeros(student.count, dtype=bool), kept_count=0,
                       total_count=student.count, always_kept=0)
    # all-masked student contributes 0, so distance is sum(ref^2) = 4
    assert G.weight_distance(ref, student, mask) == 4.0


def test_weight_distance_requires_parity():
    a = M.init_params(M.preset("mlp-tiny", (3,), 2), seed=0)
    b = M.init_params(M.preset("mlp-small", (3,), 2), seed=0)
    with pytest.raises(ConfigError):
        G.weight_distance(b.flat, a)


# --- ntk ----------------------------------------------------------------------

def test_ntk_single_linear_neuron_hand_jacobian():
    # f = w x + b: per-sample Jacobian (df/dw, df/db) = (x, 1)
    params = linear_neuron()
    x1, x2 = 0.7, -1.3
    res = G.ntk(params, np.array([[x1], [x2]]))
    expected = np.array([[x1 * x1 + 1, x1 * x2 + 1],
                         [x1 * x2 + 1, x2 * x2 + 1]])
    np.testing.assert_allclose(res.theta, expected, atol=1e-12)


def test_ntk_duplicate_sample_duplicates_rows():
    params = M.init_params(M.preset("mlp-tiny", (3,), 2), seed=1)
    x = np.random.default_rng(0).standard_normal(3)
    res = G.ntk(params, np.stack([x, x]))
    k = 2
    np.testing.assert_allclose(res.theta[:k, :k], res.theta[k:, k:], atol=1e-12)
    np.testing.assert_allclose(res.theta[:k, k:], res.theta[:k, :k], atol=1e-12)


def test_ntk_trace_is_jacobian_norm_sum():
    params = M.init_params(M.preset("mlp-tiny", (3,), 2), seed=2)
    batch = np.random.default_rng(1).standard_normal((4, 3))
    res = G.ntk(params, batch)
    total = 0.0
    for i in range(4):
        jac = G._output_jacobian(params, batch[i])
        total += (jac * jac).sum()
    assert np.trace(res.theta) == pytest.approx(total, rel=1e-12)


def test_ntk_symmetric_and_psd():
    params = M.init_params(M.preset("mlp-tiny", (4,), 3), seed=3)
    batch = np.random.default_rng(2).standard_normal((5, 4))
    theta = G.ntk(params, batch).theta
    np.testing.assert_allclose(theta, theta.T, atol=1e-6)
    eigs = np.linalg.eigvalsh(theta)
    assert eigs.min() >= -1e-6 * np.linalg.norm(theta)


def test_ntk_row_limit():
    params = M.init_params(M.preset("mlp-tiny", (4,), 3), seed=3)
    with pytest.raises(ConfigError):
        G.ntk(params, np.zeros((100, 4)))


# --- sensitivity ----------------------------------------------------------------

def test_sensitivity_symmetric_psd():
    params = M.init_params(M.preset("mlp-tiny", (4,), 3), seed=4)
    batch = np.random.default_rng(3).standard_normal((5, 4))
    s = G.sensitivity(params, batch)
    assert s.shape == (params.spec.feature_dim, params.spec.feature_dim)
    np.testing.assert_allclose(s, s.T, atol=1e-6)
    eigs = np.linalg.eigvalsh(s)
    assert eigs.min() >= -1e-6 * max(np.linalg.norm(s), 1e-30)


def test_sensitivity_orthogonal_classifier_trace_identity():
    # square orthogonal W: pinv = W.T, so trace(s) == trace of the averaged
    # pair-block kernel G_bar @ G_bar.T
    spec = M.ModelSpec((M.Dense(3, 4), M.Relu(), M.Dense(4, 4)), (3,), 4)
    params = M.init_params(spec, seed=5)
    q, _ = np.linalg.qr(np.random.default_rng(4).standard_normal((4, 4)))
    params.view("layer2.weight")[...] = q
    batch = np.random.default_rng(5).standard_normal((3, 3))
    s = G.sensitivity(params, batch)
    g_bar = np.zeros((4, params.count))
    for i in range(3):
        g_bar += G._output_jacobian(params, batch[i])
    g_bar /= 3
    np.testing.assert_allclose(np.trace(s), np.trace(g_bar @ g_bar.T), rtol=1e-9)


def test_sensitivity_zero_classifier_gives_zero():
    params = M.init_params(M.preset("mlp-tiny", (3,), 2), seed=6)
    classifier = max(e.layer_index for e in params.entries)
    params.view(f"layer{classifier}.weight")[...] = 0.0
    batch = np.random.default_rng(6).standard_normal((3, 3))
    s = G.sensitivity(params, batch)
    np.testing.assert_allclose(s, 0.0, atol=1e-30)


def test_sensitivity_drift():
    a = np.eye(3)
    assert G.sensitivity_drift(a, a) == 0.0
    assert G.sensitivity_drift(2 * a, a) == pytest.approx(1.0)
    assert G.sensitivity_drift(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0


# --- learning gap -----------------------------------------------------------------

def test_learning_gap_zero_gradient():
    spec = M.preset("mlp-tiny", (3,), 2)
    student = M.init_params(spec, seed=7)
    batch = np.random.default_rng(7).standard_normal((4, 3))
    teacher_map = M.forward(student, batch).feature_map.data  # gap already zero
    pred, meas = G.learning_gap_step(student, teacher_map, batch, lr=0.1)
    np.testing.assert_allclose(pred, 0.0, atol=1e-12)
    np.testing.assert_allclose(meas, 0.0, atol=1e-12)


def test_learning_gap_linear_model_first_order_exact():
    # feature map linear in theta -> prediction matches measurement exactly
    spec = M.ModelSpec((M.Dense(1, 1), M.Dense(1, 2)), (1,), 2)
    student = M.Parameters(spec)
    student.view("layer0.weight")[...] = 1.0
    student.view("layer1.weight")[...] = 1.0
    batch = np.array([[1.4]])
    teacher_map = np.array([[2.0]])
    pred, meas = G.learning_gap_step(student, teacher_map, batch, lr=0.05)
    np.testing.assert_allclose(pred, meas, rtol=1e-9, atol=1e-12)
    assert np.abs(pred).max() > 0


@pytest.mark.parametrize("seed", range(10))
def test_learning_gap_error_shrinks_with_lr(seed):
    # Taylor remainder: halving lr should cut the prediction error clearly
    spec = M.preset("mlp-tiny", (3,), 2)
    student = M.init_params(spec, seed=seed)
    teacher = M.init_params(spec, seed=seed + 50)
    rng = np.random.default_rng(seed + 100)
    batch = rng.standard_normal((6, 3))
    teacher_map = M.forward(teacher, batch).feature_map.data
    lr = 0.05
    pred1, meas1 = G.learning_gap_step(student, teacher_map, batch, lr)
    pred2, meas2 = G.learning_gap_step(student, teacher_map, batch, lr / 2)
    err1 = np.linalg.norm(pred1 - meas1)
    err2 = np.linalg.norm(pred2 - meas2)
    assert err2 <= 0.7 * err1 or err1 < 1e-12


def test_learning_gap_size_guard():
    spec = M.preset("mlp-small", (784,), 10)  # P*M far beyond the limit
    student = M.init_params(spec, seed=0)
    with pytest.raises(ConfigError):
        G.learning_gap_step(student, np.zeros((1, 100)), np.zeros((1, 784)), 0.1)
