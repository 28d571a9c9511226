"""Saliency scoring and one-shot mask construction.

The signature score ranks each weight by |theta * d2L/dtheta2 * dL/dtheta|
where L is the teacher-student feature-map gap on a small scoring batch;
the second derivative is the per-weight Hessian diagonal, estimated by
finite-difference Hessian-vector products. Baseline criteria (snip,
grasp, synflow, magnitude, random) share the same ScoreVector contract:
flat, nonnegative, finite, one entry per parameter.

Biases and the final classifier layer are never pruned: the sensitivity
diagnostics need the classifier weight intact, and at extreme ratios
pruning it would destroy them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError
from .model import Dense, Parameters, forward

CRITERIA = ("lnpt", "snip", "grasp", "synflow", "magnitude", "random")
HESSIAN_MODES = ("auto", "exact", "hutchinson", "hg")


@dataclass
class PruneConfig:
    criterion: str = "lnpt"
    ratio: float = 0.95
    mode: str = "unstructured"  # or "channel"
    score_batch_per_class: int = 10
    hessian_samples: int = 8
    hessian_mode: str = "auto"  # exact for tiny nets, hutchinson above 64 params
    score_sampling: str = "balanced-pseudo"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigError(f"pruning ratio must be in [0, 1), got {self.ratio}")
        if self.criterion not in CRITERIA:
            raise ConfigError(f"unknown criterion {self.criterion!r}")
        if self.mode not in ("unstructured", "channel"):
            raise ConfigError(f"unknown prune mode {self.mode!r}")
        if self.hessian_mode not in HESSIAN_MODES:
            raise ConfigError(f"unknown hessian mode {self.hessian_mode!r}")


@dataclass
class PruneMask:
    """Flat keep/remove mask aligned with Parameters.flat.

    kept_count/total_count track the units make_mask actually ranked
    (weights in unstructured mode, channels in channel mode); the
    always-kept entries (biases, final classifier) are mask=1 but sit
    outside that accounting and are reported separately.
    """
    flat: np.ndarray  # bool, length P
    kept_count: int
    total_count: int
    always_kept: int
    granularity: str = "weight"
    weight_kept: int = 0
    weight_total: int = 0

    def per_layer(self, params: Parameters) -> dict[str, np.ndarray]:
        return {e.name: self.flat[e.offset:e.offset + e.size].reshape(e.shape)
                for e in params.entries}

    @property
    def density(self) -> float:
        return self.kept_count / self.total_count if self.total_count else 1.0


def prunable_indices(params: Parameters) -> np.ndarray:
    """Flat indices eligible for pruning: weights of all but the last dense layer."""
    classifier = max(e.layer_index for e in params.entries)
    idx = []
    for e in params.entries:
        if e.kind != "weight" or e.layer_index == classifier:
            continue
        idx.append(np.arange(e.offset, e.offset + e.size))
    if not idx:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(idx)


# ---------------------------------------------------------------------------
# losses and gradients over the student parameters
# ---------------------------------------------------------------------------

def feature_loss(map_teacher, map_student) -> T.Tensor:
    """Sum over batch and features of the squared feature-map gap."""
    mt = map_teacher if isinstance(map_teacher, T.Tensor) else T.constant(map_teacher)
    ms = map_student if isinstance(map_student, T.Tensor) else T.constant(map_student)
    return T.l2_norm_sq(T.sub(mt, ms))


def teacher_maps(teacher: Parameters, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Teacher logits and feature map with gradients disabled."""
    out = forward(teacher, batch, train=False)
    return out.logits.data, out.feature_map.data


def _feature_grad_fn(student: Parameters, map_t: np.ndarray, batch: np.ndarray):
    """grad_fn(theta_flat) -> flat gradient of the feature loss at theta."""
    def grad_fn(theta: np.ndarray) -> np.ndarray:
        saved = student.flat.copy()
        student.flat[:] = theta
        try:
            out = forward(student, batch, train=True)
            loss = feature_loss(map_t, out.feature_map)
            loss.backward()
            return student.collect_grad(out.param_tensors)
        finally:
            student.flat[:] = saved
    return grad_fn


def grad_flow(student: Parameters, teacher: Parameters, batch: np.ndarray) -> np.ndarray:
    """Per-parameter gradient of the feature loss (teacher frozen)."""
    _, map_t = teacher_maps(teacher, batch)
    out = forward(student, batch, train=True)
    loss = feature_loss(map_t, out.feature_map)
    loss.backward()
    return student.collect_grad(out.param_tensors)


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

def score_lnpt(student: Parameters, teacher: Parameters, batch: np.ndarray,
               hessian_samples: int = 8, rng: np.random.Generator | None = None,
               hessian_mode: str = "auto", eps0: float = 1e-3) -> np.ndarray:
    """|theta_i * H_ii * g_i| with H, g taken on the feature-map loss.

    hessian_mode "hg" replaces the diagonal entry H_ii with (Hg)_i, the
    single-product variant; "diag"-style modes go through hessian_diag.
    """
    _, map_t = teacher_maps(teacher, batch)
    grad_fn = _feature_grad_fn(student, map_t, batch)
    theta = student.flat.astype(np.float64, copy=True)
    g = grad_fn(theta)
    if not np.any(g):
        return np.zeros_like(theta)
    if hessian_mode == "hg":
        curvature = T.hvp(grad_fn, theta, g, eps0)
    else:
        curvature = T.hessian_diag(grad_fn, theta, samples=hessian_samples,
                                   rng=rng, eps0=eps0, mode=hessian_mode)
    scores = np.abs(theta * curvature * g)
    return _check_scores(scores, "lnpt")


def score_snip(student: Parameters, teacher: Parameters, batch: np.ndarray,
               labels: np.ndarray | None = None) -> np.ndarray:
    """|theta_i * dL/dtheta_i|; L is the feature loss, or cross-entropy on
    true labels when labels are given (labeled-baseline mode)."""
    if labels is None:
        g = grad_flow(student, teacher, batch)
    else:
        out = forward(student, batch, train=True)
        onehot = np.eye(student.spec.class_count)[labels]
        loss = T.cross_entropy(out.logits, T.constant(onehot))
        loss.backward()
        g = student.collect_grad(out.param_tensors)
    return _check_scores(np.abs(student.flat * g), "snip")


def grasp_saliency(student: Parameters, teacher: Parameters, batch: np.ndarray,
                   eps0: float = 1e-3) -> np.ndarray:
    """Raw saliency -theta * (H g) on the feature loss; can be negative."""
    _, map_t = teacher_maps(teacher, batch)
    grad_fn = _feature_grad_fn(student, map_t, batch)
    theta = student.flat.astype(np.float64, copy=True)
    g = grad_fn(theta)
    if not np.any(g):
        return np.zeros_like(theta)
    hg = T.hvp(grad_fn, theta, g, eps0)
    return -theta * hg


def score_grasp(student: Parameters, teacher: Parameters, batch: np.ndarray,
                eps0: float = 1e-3) -> np.ndarray:
    """Rank form of the raw grasp saliency: most negative raw value gets the
    highest score (kept first), ties resolved by lower flat index."""
    raw = grasp_saliency(student, teacher, batch, eps0)
    order = np.argsort(raw, kind="stable")
    scores = np.empty(raw.size, dtype=np.float64)
    scores[order] = np.arange(raw.size, 0, -1, dtype=np.float64)
    return _check_scores(scores, "grasp")


def score_synflow(student: Parameters) -> np.ndarray:
    """Data-free flow score: all-ones input through the |theta| network,
    objective = sum of logits, score = |theta_i * dR/dtheta_i|."""
    abs_params = student.copy()
    abs_params.flat[:] = np.abs(abs_params.flat)
    ones = np.ones((1, int(np.prod(student.spec.input_shape))), dtype=student.dtype)
    out = forward(abs_params, ones, train=True)
    loss = T.tsum(out.logits)
    loss.backward()
    g = abs_params.collect_grad(out.param_tensors)
    return _check_scores(np.abs(abs_params.flat * g), "synflow")


def score_magnitude(student: Parameters) -> np.ndarray:
    return np.abs(student.flat).astype(np.float64)


def score_random(student: Parameters, rng: np.random.Generator) -> np.ndarray:
    return rng.random(student.count)


def _check_scores(scores: np.ndarray, criterion: str) -> np.ndarray:
    if not np.all(np.isfinite(scores)):
        bad = int(np.flatnonzero(~np.isfinite(scores))[0])
        raise NumericError(f"{criterion} produced non-finite score at flat index {bad}")
    return scores


def compute_scores(student: Parameters, config: PruneConfig,
                   teacher: Parameters | None = None,
                   batch: np.ndarray | None = None,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Dispatch on config.criterion; data-free criteria ignore teacher/batch."""
    c = config.criterion
    if c == "magnitude":
        return score_magnitude(student)
    if c == "random":
        if rng is None:
            raise ConfigError("random criterion needs a seeded rng")
        return score_random(student, rng)
    if c == "synflow":
        return score_synflow(student)
    if teacher is None or batch is None:
        raise ConfigError(f"criterion {c!r} needs a teacher and a scoring batch")
    if c == "lnpt":
        return score_lnpt(student, teacher, batch, config.hessian_samples,
                          rng, config.hessian_mode)
    if c == "snip":
        return score_snip(student, teacher, batch)
    if c == "grasp":
        return score_grasp(student, teacher, batch)
    raise ConfigError(f"unknown criterion {c!r}")


# ---------------------------------------------------------------------------
# mask construction
# ---------------------------------------------------------------------------

def _round_count(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_mask(scores: np.ndarray, ratio: float, params: Parameters) -> PruneMask:
    """Keep the top (1 - ratio) fraction of prunable weights by score.

    Exact: kept == total - round(ratio * total). Ties at the threshold are
    broken by lower flat index (kept first). Deterministic.
    """
    if ratio >= 1.0 or ratio < 0.0:
        raise ConfigError(f"pruning ratio must be in [0, 1), got {ratio}")
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise NumericError("make_mask: scores contain non-finite entries")
    prunable = prunable_indices(params)
    total = prunable.size
    keep = total - _round_count(ratio * total)
    mask = np.ones(params.count, dtype=bool)
    mask[prunable] = False
    # stable sort on -score: descending score, ascending index within ties
    order = np.argsort(-scores[prunable], kind="stable")
    mask[prunable[order[:keep]]] = True
    return PruneMask(flat=mask, kept_count=keep, total_count=total,
                     always_kept=params.count - total, granularity="weight",
                     weight_kept=keep, weight_total=total)


def channel_slices(params: Parameters) -> list[tuple[str, int, slice]]:
    """(layer name, channel index, flat slice) for every prunable output channel."""
    classifier = max(e.layer_index for e in params.entries)
    out = []
    for e in params.entries:
        if e.kind != "weight" or e.layer_index == classifier:
            continue
        layer = params.spec.layers[e.layer_index]
        n_ch = layer.out_features if isinstance(layer, Dense) else layer.out_channels
        per = e.size // n_ch
        for c in range(n_ch):
            out.append((e.name, c, slice(e.offset + c * per, e.offset + (c + 1) * per)))
    return out


def channel_scores(scores: np.ndarray, params: Parameters) -> np.ndarray:
    """Sum member-weight scores within each prunable output channel."""
    chans = channel_slices(params)
    return np.array([scores[s].sum() for _, _, s in chans])


def make_channel_mask(scores: np.ndarray, ratio: float, params: Parameters) -> PruneMask:
    """Rank whole output channels by summed score under one global ratio."""
    if ratio >= 1.0 or ratio < 0.0:
        raise ConfigError(f"pruning ratio must be in [0, 1), got {ratio}")
    chans = channel_slices(params)
    ch_scores = channel_scores(scores, params)
    total = len(chans)
    keep = total - _round_count(ratio * total)
    order = np.argsort(-ch_scores, kind="stable")
    mask = np.ones(params.count, dtype=bool)
    for _, _, s in chans:
        mask[s] = False
    weight_kept = 0
    for ci in order[:keep]:
        _, _, s = chans[ci]
        mask[s] = True
        weight_kept += s.stop - s.start
    weight_total = sum(s.stop - s.start for _, _, s in chans)
    return PruneMask(flat=mask, kept_count=keep, total_count=total,
                     always_kept=params.count - weight_total, granularity="channel",
                     weight_kept=weight_kept, weight_total=weight_total)


def apply_mask(params: Parameters, mask: PruneMask):
    """Zero masked weights in place; returns a hook that zeroes their
    gradients so sparsity is permanent across training."""
    params.flat[~mask.flat] = 0.0

    removed = ~mask.flat

    def zero_masked_grads(grad_flat: np.ndarray) -> np.ndarray:
        grad_flat[removed] = 0.0
        return grad_flat

    return zero_masked_grads


def sparsity_report(mask: PruneMask, params: Parameters) -> dict:
    """Per-layer kept fractions plus the global accounting."""
    per_layer = []
    prunable = np.zeros(params.count, dtype=bool)
    prunable[prunable_indices(params)] = True
    for e in params.entries:
        seg = slice(e.offset, e.offset + e.size)
        layer_prunable = bool(prunable[seg].any())
        kept = int(mask.flat[seg].sum())
        per_layer.append({
            "name": e.name, "total": e.size, "kept": kept,
            "kept_fraction": kept / e.size, "prunable": layer_prunable,
        })
    return {
        "granularity": mask.granularity,
        "kept_count": mask.kept_count,
        "total_count": mask.total_count,
        "weight_kept": mask.weight_kept,
        "weight_total": mask.weight_total,
        "always_kept": mask.always_kept,
        "density": mask.density,
        "per_layer": per_layer,
    }
