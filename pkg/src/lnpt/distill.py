"""Label-free training losses and the masked SGD trainer.

Modes:
  lnpt         pseudo one-hot CE + alpha * temperature-scaled feature MSE
  oh_only      pseudo one-hot CE alone
  fm_only      alpha * feature MSE alone
  true_label   supervised CE on real labels (ablation)
  classical_kd supervised CE + alpha * CE against softened teacher logits

The label-free modes consume an UnlabeledDataset, which has no label
field, so the training path cannot read labels even by accident.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset, UnlabeledDataset
from .errors import ConfigError, NumericError
from .model import Parameters, forward
from .pruning import PruneMask, apply_mask

MODES = ("lnpt", "classical_kd", "true_label", "oh_only", "fm_only")
LABEL_FREE_MODES = ("lnpt", "oh_only", "fm_only")


@dataclass
class DistillConfig:
    mode: str = "lnpt"
    alpha: float = 1.0
    temp: float = 4.0
    epochs: int = 30
    lr: float = 0.1
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    seed: int = 0
    symmetric_temp: bool = False

    def __post_init__(self):
        if self.temp <= 0:
            raise ConfigError("temperature must be > 0")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.lr <= 0:
            raise ConfigError("learning rate must be > 0")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")


@dataclass
class RunRecord:
    epoch: int
    loss_oh: float
    loss_fm: float
    loss_total: float
    test_accuracy: float
    dtd: float | None
    eval_mean_lm: float
    lr: float

    FIELDS = ("epoch", "loss_oh", "loss_fm", "loss_total", "test_accuracy",
              "dtd", "eval_mean_lm", "lr")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def pseudo_onehot(teacher_logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax as hard targets; ties go to the lowest class index."""
    logits = np.asarray(teacher_logits)
    if np.isnan(logits).any():
        raise NumericError("pseudo_onehot: NaN in teacher logits")
    k = logits.shape[-1]
    return np.eye(k, dtype=logits.dtype)[np.argmax(logits, axis=-1)]


def loss_oh(student_logits: T.Tensor, pseudo_targets: np.ndarray) -> T.Tensor:
    """Mean-over-batch cross-entropy against pseudo one-hot targets."""
    return T.cross_entropy(student_logits, T.constant(pseudo_targets))


def loss_feature_kd(map_teacher: np.ndarray, map_student: T.Tensor,
                    temp: float, symmetric: bool = False) -> T.Tensor:
    """MSE between the teacher map and the temperature-scaled student map
    (mean over batch and feature dims). With symmetric=True both maps are
    scaled by 1/temp."""
    mt = map_teacher / temp if symmetric else map_teacher
    return T.mse(T.constant(mt), T.scale(map_student, 1.0 / temp))


def loss_kd_classical(student_logits: T.Tensor, teacher_logits: np.ndarray,
                      labels: np.ndarray, alpha: float, temp: float) -> T.Tensor:
    """Supervised CE plus alpha * CE against the softened teacher softmax."""
    k = teacher_logits.shape[-1]
    onehot = np.eye(k)[np.asarray(labels, dtype=np.int64)]
    hard = T.cross_entropy(student_logits, T.constant(onehot))
    soft_targets = T.softmax(T.constant(teacher_logits / temp)).data
    soft = T.cross_entropy(student_logits, T.constant(soft_targets))
    return T.add(hard, T.scale(soft, alpha))


def batch_loss(mode: str, student_logits: T.Tensor, student_map: T.Tensor,
               teacher_logits: np.ndarray, teacher_map: np.ndarray,
               config: DistillConfig, labels: np.ndarray | None = None):
    """Total loss plus its (oh, fm) components as floats."""
    if mode in ("lnpt", "oh_only", "fm_only"):
        oh = loss_oh(student_logits, pseudo_onehot(teacher_logits))
        fm = loss_feature_kd(teacher_map, student_map, config.temp, config.symmetric_temp)
        if mode == "oh_only":
            total = oh
        elif mode == "fm_only":
            total = T.scale(fm, config.alpha)
        else:
            total = T.add(oh, T.scale(fm, config.alpha))
        return total, oh.item(), fm.item()
    if labels is None:
        raise ConfigError(f"mode {mode!r} requires labels")
    if mode == "true_label":
        k = teacher_logits.shape[-1]
        onehot = np.eye(k)[np.asarray(labels, dtype=np.int64)]
        total = T.cross_entropy(student_logits, T.constant(onehot))
        return total, total.item(), 0.0
    if mode == "classical_kd":
        total = loss_kd_classical(student_logits, teacher_logits, labels,
                                  config.alpha, config.temp)
        return total, total.item(), 0.0
    raise ConfigError(f"unknown mode {mode!r}")


def cosine_lr(epoch: int, config: DistillConfig) -> float:
    """lr(e) = lr_min + (lr0 - lr_min) * (1 + cos(pi e / N)) / 2."""
    n = config.epochs
    return config.lr_min + 0.5 * (config.lr - config.lr_min) * (
        1.0 + math.cos(math.pi * epoch / n))


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def accuracy(params: Parameters, ds, batch_size: int = 512) -> float:
    """Fraction of eval samples whose argmax logit matches the label."""
    hits = 0
    for lo in range(0, len(ds), batch_size):
        chunk = ds.inputs[lo:lo + batch_size]
        out = forward(params, chunk)
        hits += int((np.argmax(out.logits.data, axis=1) == ds.labels[lo:lo + batch_size]).sum())
    return hits / len(ds)


def mean_feature_gap(student: Parameters, teacher: Parameters, inputs: np.ndarray,
                     batch_size: int = 512) -> float:
    """Mean over samples of the squared feature-map gap (no temperature)."""
    total = 0.0
    for lo in range(0, len(inputs), batch_size):
        chunk = inputs[lo:lo + batch_size]
        ms = forward(student, chunk).feature_map.data
        mt = forward(teacher, chunk).feature_map.data
        total += float(((mt - ms) ** 2).sum())
    return total / len(inputs)


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

def train(student: Parameters, mask: PruneMask | None, teacher: Parameters,
          train_data: Dataset | UnlabeledDataset, eval_data: Dataset,
          config: DistillConfig,
          distance_ref: np.ndarray | None = None,
          epoch_hook=None) -> list[RunRecord]:
    """SGD with momentum, L2 decay, per-epoch cosine annealing, and the
    mask hook that keeps pruned weights at exactly zero. Mutates student
    in place and returns one RunRecord per epoch.

    distance_ref is the flat vector the per-epoch weight distance d^T d is
    measured against (trained teacher or the student's own init).
    epoch_hook(epoch, student) runs after each epoch's record is taken,
    for read-only extra diagnostics.
    """
    if config.mode in LABEL_FREE_MODES:
        if isinstance(train_data, Dataset):
            train_data = train_data.unlabeled()
    elif not isinstance(train_data, Dataset) or train_data.labels is None:
        raise ConfigError(f"mode {config.mode!r} needs labeled training data")

    teacher_checksum = float(np.abs(teacher.flat).sum())
    hook = apply_mask(student, mask) if mask is not None else None
    velocity = np.zeros_like(student.flat)
    order_rng = np.random.default_rng(config.seed)
    n = len(train_data)
    records: list[RunRecord] = []

    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config)
        order = order_rng.permutation(n)
        sums = np.zeros(3)
        steps = 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            batch = train_data.inputs[idx]
            labels = train_data.labels[idx] if isinstance(train_data, Dataset) else None
            t_out = forward(teacher, batch)
            s_out = forward(student, batch, train=True)
            total, oh_val, fm_val = batch_loss(
                config.mode, s_out.logits, s_out.feature_map,
                t_out.logits.data, t_out.feature_map.data, config, labels)
            total_val = total.item()
            if not math.isfinite(total_val):
                raise NumericError(
                    f"loss became non-finite at epoch {epoch}, step {steps}")
            total.backward()
            grad = student.collect_grad(s_out.param_tensors)
            if config.weight_decay:
                grad += config.weight_decay * student.flat
            if hook is not None:
                hook(grad)
            velocity *= config.momentum
            velocity += grad
            student.flat -= lr * velocity
            sums += (oh_val, fm_val, total_val)
            steps += 1

        dtd = None
        if distance_ref is not None:
            masked = student.flat if mask is None else student.flat * mask.flat
            diff = distance_ref - masked
            dtd = float(diff @ diff)
        mean_oh, mean_fm = sums[0] / steps, sums[1] / steps
        if config.mode == "lnpt":
            mean_total = mean_oh + config.alpha * mean_fm
        elif config.mode == "fm_only":
            mean_total = config.alpha * mean_fm
        else:
            mean_total = sums[2] / steps
        records.append(RunRecord(
            epoch=epoch,
            loss_oh=mean_oh,
            loss_fm=mean_fm,
            loss_total=mean_total,
            test_accuracy=accuracy(student, eval_data),
            dtd=dtd,
            eval_mean_lm=mean_feature_gap(student, teacher, eval_data.inputs),
            lr=lr,
        ))
        if epoch_hook is not None:
            epoch_hook(epoch, student)

    if float(np.abs(teacher.flat).sum()) != teacher_checksum:
        raise NumericError("teacher parameters changed during training")
    return records


def train_supervised(params: Parameters, train_data: Dataset, eval_data: Dataset,
                     config: DistillConfig) -> list[RunRecord]:
    """Plain supervised training (the teacher's own regime): CE on true
    labels with the same optimizer and schedule."""
    if train_data.labels is None:
        raise ConfigError("supervised training needs labels")
    velocity = np.zeros_like(params.flat)
    order_rng = np.random.default_rng(config.seed)
    n = len(train_data)
    k = params.spec.class_count
    eye = np.eye(k)
    records: list[RunRecord] = []
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config)
        order = order_rng.permutation(n)
        loss_sum, steps = 0.0, 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            out = forward(params, train_data.inputs[idx], train=True)
            loss = T.cross_entropy(out.logits, T.constant(eye[train_data.labels[idx]]))
            val = loss.item()
            if not math.isfinite(val):
                raise NumericError(f"loss became non-finite at epoch {epoch}, step {steps}")
            loss.backward()
            grad = params.collect_grad(out.param_tensors)
            if config.weight_decay:
                grad += config.weight_decay * params.flat
            velocity *= config.momentum
            velocity += grad
            params.flat -= lr * velocity
            loss_sum += val
            steps += 1
        records.append(RunRecord(
            epoch=epoch, loss_oh=loss_sum / steps, loss_fm=0.0,
            loss_total=loss_sum / steps,
            test_accuracy=accuracy(params, eval_data),
            dtd=None, eval_mean_lm=0.0, lr=lr))
    return records
