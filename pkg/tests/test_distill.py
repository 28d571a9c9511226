import math

import numpy as np
import pytest

from lnpt import distill as D
from lnpt import model as M
from lnpt import pruning as P
from lnpt import tensor as T
from lnpt.data import Dataset, synth_blobs
from lnpt.errors import ConfigError, NumericError


def test_pseudo_onehot_argmax():
    out = D.pseudo_onehot(np.array([[0.2, 0.5, 0.3]]))
    np.testing.assert_array_equal(out, [[0, 1, 0]])


def test_pseudo_onehot_tie_lowest_index():
    out = D.pseudo_onehot(np.array([[1.0, 1.0, 0.0]]))
    np.testing.assert_array_equal(out, [[1, 0, 0]])


def test_pseudo_onehot_rows_sum_to_one():
    rng = np.random.default_rng(0)
    out = D.pseudo_onehot(rng.standard_normal((20, 7)))
    np.testing.assert_array_equal(out.sum(axis=1), np.ones(20))


def test_pseudo_onehot_rejects_nan():
    with pytest.raises(NumericError):
        D.pseudo_onehot(np.array([[np.nan, 1.0]]))


def test_loss_oh_uniform_logits():
    logits = T.Tensor(np.zeros((3, 10)))
    targets = D.pseudo_onehot(np.eye(10)[:3])
    assert D.loss_oh(logits, targets).item() == pytest.approx(math.log(10), rel=1e-12)


def test_loss_oh_confident_correct_goes_to_zero():
    logits = T.Tensor(np.array([[50.0, 0.0, 0.0]]))
    targets = np.array([[1.0, 0.0, 0.0]])
    assert D.loss_oh(logits, targets).item() < 1e-9


def test_loss_oh_class_permutation_invariance():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((4, 5))
    targets = D.pseudo_onehot(rng.standard_normal((4, 5)))
    perm = rng.permutation(5)
    a = D.loss_oh(T.Tensor(logits), targets).item()
    b = D.loss_oh(T.Tensor(logits[:, perm]), targets[:, perm]).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_loss_feature_kd_scaled_match_is_zero():
    mt = np.array([[1.0, -2.0]])
    ms = T.Tensor(4.0 * mt)
    assert D.loss_feature_kd(mt, ms, temp=4.0).item() == 0.0


def test_loss_feature_kd_direct():
    # m_t=[1,1], m_s=[3,1], T=2 -> mean((1-1.5)^2, (1-0.5)^2) = 0.25
    out = D.loss_feature_kd(np.array([[1.0, 1.0]]), T.Tensor([[3.0, 1.0]]), temp=2.0)
    assert out.item() == 0.25


def test_loss_feature_kd_permutation_invariance():
    rng = np.random.default_rng(2)
    mt, ms = rng.standard_normal((3, 6)), rng.standard_normal((3, 6))
    perm = rng.permutation(6)
    a = D.loss_feature_kd(mt, T.Tensor(ms), temp=3.0).item()
    b = D.loss_feature_kd(mt[:, perm], T.Tensor(ms[:, perm]), temp=3.0).item()
    assert a == pytest.approx(b, rel=1e-12)


def _loss_parts(alpha, temp=1.0, mode="lnpt"):
    rng = np.random.default_rng(3)
    cfg = D.DistillConfig(mode=mode, alpha=alpha, temp=temp, epochs=1)
    s_logits = T.Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    s_map = T.Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    t_logits = rng.standard_normal((4, 5))
    t_map = rng.standard_normal((4, 6))
    total, oh, fm = D.batch_loss(mode, s_logits, s_map, t_logits, t_map, cfg)
    return total, oh, fm, s_logits, s_map


def test_total_loss_alpha_zero_equals_oh():
    total, oh, _, _, _ = _loss_parts(alpha=0.0)
    assert total.item() == oh


def test_total_loss_additive_composition():
    total, oh, fm, _, _ = _loss_parts(alpha=1.0)
    assert total.item() == pytest.approx(oh + fm, rel=1e-12)


def test_total_loss_gradient_linearity():
    # grad(total) == grad(oh) + alpha * grad(fm) within 1e-6
    alpha = 0.7
    total, _, _, s_logits, s_map = _loss_parts(alpha=alpha)
    total.backward()
    g_logits, g_map = s_logits.grad.copy(), s_map.grad.copy()

    rng = np.random.default_rng(3)
    cfg = D.DistillConfig(mode="lnpt", alpha=alpha, temp=1.0, epochs=1)
    sl = T.Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    sm = T.Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    tl = rng.standard_normal((4, 5))
    tm = rng.standard_normal((4, 6))
    oh = D.loss_oh(sl, D.pseudo_onehot(tl))
    oh.backward()
    g1 = sl.grad.copy()
    sl2 = T.Tensor(sl.data, requires_grad=True)
    sm2 = T.Tensor(sm.data, requires_grad=True)
    fm = D.loss_feature_kd(tm, sm2, temp=1.0)
    fm.backward()
    g2 = sm2.grad.copy()
    np.testing.assert_allclose(g_logits, g1, atol=1e-6)
    np.testing.assert_allclose(g_map, alpha * g2, atol=1e-6)


def test_classical_kd_alpha_zero_is_plain_ce():
    rng = np.random.default_rng(4)
    sl = rng.standard_normal((3, 4))
    tl = rng.standard_normal((3, 4))
    y = np.array([0, 2, 1])
    got = D.loss_kd_classical(T.Tensor(sl), tl, y, alpha=0.0, temp=1.0).item()
    want = T.cross_entropy(T.Tensor(sl), T.constant(np.eye(4)[y])).item()
    assert got == pytest.approx(want, rel=1e-12)


def test_classical_kd_high_temp_teacher_term_is_uniform_ce():
    rng = np.random.default_rng(5)
    sl = rng.standard_normal((3, 4))
    tl = rng.standard_normal((3, 4))
    y = np.array([0, 1, 2])
    base = D.loss_kd_classical(T.Tensor(sl), tl, y, alpha=0.0, temp=1.0).item()
    hot = D.loss_kd_classical(T.Tensor(sl), tl, y, alpha=1.0, temp=1e9).item()
    uniform_ce = T.cross_entropy(T.Tensor(sl), T.constant(np.full((3, 4), 0.25))).item()
    assert hot - base == pytest.approx(uniform_ce, rel=1e-6)


def test_classical_kd_self_distillation_entropy_identity():
    rng = np.random.default_rng(6)
    logits = rng.standard_normal((3, 4))
    y = np.array([0, 1, 2])
    base = D.loss_kd_classical(T.Tensor(logits), logits, y, alpha=0.0, temp=1.0).item()
    both = D.loss_kd_classical(T.Tensor(logits), logits, y, alpha=1.0, temp=1.0).item()
    probs = T.softmax(T.Tensor(logits)).data
    entropy = float(-(probs * np.log(probs)).sum(axis=1).mean())
    assert both - base == pytest.approx(entropy, rel=1e-9)


def test_cosine_schedule_endpoints():
    cfg = D.DistillConfig(epochs=10, lr=0.1, lr_min=0.001)
    assert D.cosine_lr(0, cfg) == pytest.approx(0.1)
    assert D.cosine_lr(10, cfg) == pytest.approx(0.001)


# --- trainer ----------------------------------------------------------------

def little_world(seed=0, n_per_class=40, epochs=3):
    data = synth_blobs(3, n_per_class, dim=4, spread=0.4, seed=11)
    from lnpt.data import split_dataset
    train_ds, test_ds = split_dataset(data, 0.25, seed=1)
    spec = M.preset("mlp-tiny", (4,), 3)
    teacher = M.init_params(spec, seed=99)
    tcfg = D.DistillConfig(mode="true_label", epochs=8, lr=0.1, batch_size=32, seed=5)
    D.train_supervised(teacher, train_ds, test_ds, tcfg)
    student = M.init_params(spec, seed=seed)
    return train_ds, test_ds, teacher, student


def test_single_step_matches_hand_computed_sgd():
    # one batch, one epoch, zero decay: w' = w - lr * (softmax - onehot-ish grads)
    spec = M.ModelSpec((M.Dense(1, 2),), (1,), 2)
    student = M.Parameters(spec)
    teacher = M.Parameters(spec)
    student.view("layer0.weight")[...] = [[1.0], [0.0]]
    teacher.view("layer0.weight")[...] = [[2.0], [0.0]]
    x = np.array([[1.0]])
    train_ds = Dataset(x, np.array([0]), 2)
    cfg = D.DistillConfig(mode="oh_only", alpha=0.0, temp=1.0, epochs=1, lr=0.25,
                          momentum=0.9, weight_decay=0.0, batch_size=8, seed=0)
    D.train(student, None, teacher, train_ds, train_ds, cfg)
    # teacher logits [2, 0] -> pseudo label 0; student logits [1, 0]
    s = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
    grad_w = (s - np.array([1.0, 0.0])) * 1.0  # d CE / d w_j = (sigma_j - t_j) x
    expected_w = np.array([[1.0], [0.0]]) - 0.25 * grad_w[:, None]
    np.testing.assert_allclose(student.view("layer0.weight"), expected_w, rtol=1e-12)


def test_masked_weights_stay_zero_through_training():
    train_ds, test_ds, teacher, student = little_world()
    scores = P.score_magnitude(student)
    mask = P.make_mask(scores, 0.9, student)
    cfg = D.DistillConfig(mode="lnpt", temp=1.0, epochs=4, batch_size=16, seed=2)
    D.train(student, mask, teacher, train_ds, test_ds, cfg)
    assert not student.flat[~mask.flat].any()
    density = mask.flat.sum() / mask.flat.size
    nonzero = np.count_nonzero(student.flat) / student.count
    assert nonzero <= density


def test_loss_decomposition_every_epoch():
    train_ds, test_ds, teacher, student = little_world()
    cfg = D.DistillConfig(mode="lnpt", alpha=0.37, temp=1.0, epochs=3,
                          batch_size=16, seed=3)
    records = D.train(student, None, teacher, train_ds, test_ds, cfg)
    for r in records:
        assert r.loss_total == pytest.approx(r.loss_oh + cfg.alpha * r.loss_fm, rel=1e-12)


def test_training_is_deterministic():
    r1 = D.train(*_fresh_run(), _cfg())
    r2 = D.train(*_fresh_run(), _cfg())
    assert r1 == r2


def _cfg():
    return D.DistillConfig(mode="lnpt", temp=1.0, epochs=3, batch_size=16, seed=7)


def _fresh_run():
    train_ds, test_ds, teacher, student = little_world(seed=3)
    return student, None, teacher, train_ds, test_ds


def test_label_free_mode_ignores_garbage_labels():
    train_ds, test_ds, teacher, _ = little_world(seed=4)
    garbage = Dataset(train_ds.inputs, (train_ds.labels + 1) % 3, train_ds.class_count)
    cfg = D.DistillConfig(mode="lnpt", temp=1.0, epochs=3, batch_size=16, seed=9)
    s1 = M.init_params(M.preset("mlp-tiny", (4,), 3), seed=5)
    s2 = M.init_params(M.preset("mlp-tiny", (4,), 3), seed=5)
    r1 = D.train(s1, None, teacher, train_ds, test_ds, cfg)
    r2 = D.train(s2, None, teacher, garbage, test_ds, cfg)
    assert r1 == r2
    assert np.array_equal(s1.flat, s2.flat)


def test_teacher_unchanged_by_training():
    train_ds, test_ds, teacher, student = little_world(seed=6)
    before = teacher.flat.copy()
    cfg = D.DistillConfig(mode="lnpt", temp=1.0, epochs=2, batch_size=16, seed=0)
    D.train(student, None, teacher, train_ds, test_ds, cfg)
    assert np.array_equal(teacher.flat, before)


def test_labeled_mode_requires_labels():
    train_ds, test_ds, teacher, student = little_world(seed=7)
    cfg = D.DistillConfig(mode="true_label", epochs=1, batch_size=16)
    with pytest.raises(ConfigError):
        D.train(student, None, teacher, train_ds.unlabeled(), test_ds, cfg)


def test_supervised_trainer_learns_blobs():
    data = synth_blobs(4, 60, dim=5, spread=0.3, seed=21)
    from lnpt.data import Standardizer, split_dataset
    train_ds, test_ds = split_dataset(data, 0.25, seed=2)
    std = Standardizer.fit(train_ds.inputs)
    train_ds = Dataset(std.apply(train_ds.inputs), train_ds.labels, 4)
    test_ds = Dataset(std.apply(test_ds.inputs), test_ds.labels, 4)
    spec = M.preset("mlp-small", (5,), 4)
    params = M.init_params(spec, seed=0)
    cfg = D.DistillConfig(mode="true_label", epochs=20, lr=0.1, batch_size=32, seed=1)
    records = D.train_supervised(params, train_ds, test_ds, cfg)
    assert records[-1].test_accuracy >= 0.95
