"""Generalization instrumentation.

weight_distance tracks the squared teacher-student parameter gap (the
rise-then-fall of which is the "weight escape" effect). The kernel
diagnostics build per-sample output Jacobians: the kernel matrix is
their Gram matrix, and the classifier pseudoinverse projects it down to
feature-map space, whose stability over training is the hypothesis the
harness logs. learning_gap_step validates the first-order prediction of
the feature-map change under one SGD step against the measured change.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .model import ClassifierView, Parameters, forward
from .pruning import PruneMask, feature_loss

JACOBIAN_LIMIT = 10 ** 6  # P * M cap for explicit feature Jacobians
NTK_ROW_LIMIT = 256  # N * K cap for the full kernel matrix


def weight_distance(ref_flat: np.ndarray, student: Parameters,
                    mask: PruneMask | None = None) -> float:
    """d^T d with d = ref - theta_s; masked student entries count as zero."""
    if ref_flat.shape != student.flat.shape:
        raise ConfigError(
            "weight distance needs architecture parity; measure against the "
            "student's own initialization when the teacher differs")
    theta = student.flat if mask is None else student.flat * mask.flat
    d = ref_flat - theta
    return float(d @ d)


def _output_jacobian(params: Parameters, x_row: np.ndarray) -> np.ndarray:
    """(K, P) Jacobian of the logits for one sample, one backward per class."""
    out = forward(params, x_row[None, :], train=True)
    k = params.spec.class_count
    jac = np.empty((k, params.count))
    for j in range(k):
        pick = np.zeros((1, k))
        pick[0, j] = 1.0
        scalar = T.weighted_sum(out.logits, pick)
        scalar.backward()
        jac[j] = params.collect_grad(out.param_tensors)
        T.clear_grads(scalar)
    return jac


def _feature_jacobian(params: Parameters, batch: np.ndarray) -> np.ndarray:
    """(M, P) Jacobian of the batch-mean feature map, one backward per feature."""
    out = forward(params, batch, train=True)
    m = params.spec.feature_dim
    n = batch.shape[0]
    jac = np.empty((m, params.count))
    for j in range(m):
        pick = np.zeros((n, m))
        pick[:, j] = 1.0 / n
        scalar = T.weighted_sum(out.feature_map, pick)
        scalar.backward()
        jac[j] = params.collect_grad(out.param_tensors)
        T.clear_grads(scalar)
    return jac


@dataclass
class NtkResult:
    theta: np.ndarray  # (N*K, N*K) Gram matrix of output Jacobians
    sample_count: int
    class_count: int


def ntk(params: Parameters, batch: np.ndarray) -> NtkResult:
    """Full empirical kernel: Gram matrix of all per-sample output Jacobians."""
    n = batch.shape[0]
    k = params.spec.class_count
    if n * k > NTK_ROW_LIMIT:
        raise ConfigError(f"kernel would have {n * k} rows; limit is {NTK_ROW_LIMIT}")
    rows = np.concatenate([_output_jacobian(params, batch[i]) for i in range(n)])
    return NtkResult(theta=rows @ rows.T, sample_count=n, class_count=k)


def sensitivity(params: Parameters, batch: np.ndarray) -> np.ndarray:
    """(M, M) projection of the kernel through the classifier pseudoinverse.

    The K x K kernel blocks are averaged over all sample pairs, which
    equals G_bar @ G_bar.T for G_bar the mean per-sample Jacobian, so the
    projection is computed directly from G_bar.
    """
    n = batch.shape[0]
    g_bar = np.zeros((params.spec.class_count, params.count))
    for i in range(n):
        g_bar += _output_jacobian(params, batch[i])
    g_bar /= n
    w_pinv = ClassifierView(params).pinv  # (M, K)
    proj = w_pinv @ g_bar  # (M, P)
    return proj @ proj.T


def sensitivity_drift(current: np.ndarray, initial: np.ndarray) -> float:
    """Relative Frobenius drift ||s_t - s_0||_F / ||s_0||_F."""
    denom = float(np.linalg.norm(initial))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(current - initial)) / denom


def learning_gap_step(student: Parameters, teacher_map: np.ndarray,
                      batch: np.ndarray, lr: float,
                      loss_grad: np.ndarray | None = None):
    """Predict the one-step change of the batch-mean feature-map gap and
    measure it by actually taking the step on a scratch copy.

    Prediction: lr * J @ g with J the explicit feature Jacobian; measured:
    mean feature map before minus after a plain SGD step. Returns
    (predicted, measured), both length-M vectors.
    """
    m = student.spec.feature_dim
    if student.count * m > JACOBIAN_LIMIT:
        raise ConfigError(
            f"explicit feature Jacobian needs {student.count * m} entries "
            f"(limit {JACOBIAN_LIMIT}); use a smaller preset")
    if loss_grad is None:
        out = forward(student, batch, train=True)
        loss = feature_loss(teacher_map, out.feature_map)
        loss.backward()
        loss_grad = student.collect_grad(out.param_tensors)
    jac = _feature_jacobian(student, batch)
    predicted = lr * (jac @ loss_grad)

    before = forward(student, batch).feature_map.data.mean(axis=0)
    stepped = student.copy()
    stepped.flat -= lr * loss_grad
    after = forward(stepped, batch).feature_map.data.mean(axis=0)
    measured = before - after
    return predicted, measured


def feature_loss_trace(records) -> list[float]:
    """Per-epoch mean feature gap pulled from training records."""
    return [r.eval_mean_lm for r in records]
