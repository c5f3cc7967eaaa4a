"""Loss functions with analytic gradients.

Every loss returns a :class:`LossOutput` whose ``grad`` is the partial
derivative of the batch-mean loss w.r.t. its primary input (features for the
metric losses, logits for the classification loss).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .anchors import AnchorSet, check_labels_covered
from .errors import AnchorRegistryError, ConfigError, DataError, DegenerateBatchError

EUCLIDEAN = "euclidean"
SQUARED_EUCLIDEAN = "squared_euclidean"
METRICS = (EUCLIDEAN, SQUARED_EUCLIDEAN)
_ALIASES = {"l2": EUCLIDEAN, "sql2": SQUARED_EUCLIDEAN, EUCLIDEAN: EUCLIDEAN, SQUARED_EUCLIDEAN: SQUARED_EUCLIDEAN}


def resolve_metric(name: str) -> str:
    try:
        return _ALIASES[name]
    except KeyError:
        raise ConfigError(f"unknown distance metric {name!r}; choose from {sorted(_ALIASES)}") from None


def pair_distance(diff: np.ndarray, metric: str):
    """Row-wise distance for ``diff = u - v`` and its gradient w.r.t. ``u``.

    Euclidean distance has gradient ``diff / d``; at ``d == 0`` the zero
    subgradient is used.
    """
    sq = np.einsum("ij,ij->i", diff, diff)
    if metric == SQUARED_EUCLIDEAN:
        return sq, 2.0 * diff
    if metric != EUCLIDEAN:
        raise ConfigError(f"unknown distance metric {metric!r}")
    d = np.sqrt(sq)
    safe = np.where(d > 0, d, 1.0)
    g = np.where((d > 0)[:, None], diff / safe[:, None], 0.0)
    return d, g


def distance_matrix(a: np.ndarray, b: np.ndarray, metric: str) -> np.ndarray:
    sq = kernels.pairwise_sqdist(a, b)
    if metric == SQUARED_EUCLIDEAN:
        return sq
    return np.sqrt(sq)


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray
    grad_params: dict = field(default_factory=dict)


@dataclass
class CenterBank:
    """Learnable per-class centers for the parametric center-loss baseline."""

    centers: np.ndarray
    lr_mult: float = 1.0

    @classmethod
    def random(cls, n_classes, feat_dim, seed, scale=1.0, lr_mult=1.0):
        rng = np.random.default_rng(seed)
        return cls(scale * rng.standard_normal((n_classes, feat_dim)), lr_mult)


def _check_labels(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        bad = labels[(labels < 0) | (labels >= n_classes)][0]
        raise DataError(f"label {int(bad)} outside [0, {n_classes})")
    return labels


def cross_entropy_ls(logits, labels, epsilon: float = 0.1) -> LossOutput:
    """Mean cross-entropy against targets ``1-eps`` (true class), ``eps/(C-1)`` elsewhere."""
    logits = np.asarray(logits, dtype=np.float64)
    n, C = logits.shape
    labels = _check_labels(labels, C)
    if not 0.0 <= epsilon < 1.0:
        raise ConfigError("label smoothing epsilon must lie in [0, 1)")
    if C == 1 and epsilon > 0:
        raise ConfigError("label smoothing needs at least two classes")
    off = epsilon / (C - 1) if C > 1 else 0.0
    target = np.full((n, C), off)
    target[np.arange(n), labels] = 1.0 - epsilon

    z = logits - logits.max(axis=1, keepdims=True)
    log_sum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_sum
    # zero-weight targets must not turn 0 * -inf into nan
    value = -np.sum(np.where(target > 0, target * log_p, 0.0)) / n
    grad = (np.exp(log_p) - target) / n
    return LossOutput(float(value), grad)


def batch_hard_triplet(features, labels, margin: float = 0.3, metric: str = EUCLIDEAN) -> LossOutput:
    """Hardest-positive / hardest-negative hinge, averaged over anchors that have both."""
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    metric = resolve_metric(metric)
    dist = distance_matrix(f, f, metric)
    pos, neg = kernels.batch_hard_mine(dist, labels)
    valid = np.flatnonzero((pos >= 0) & (neg >= 0))
    if valid.size == 0:
        raise DegenerateBatchError("batch has no sample with both a positive and a negative")

    d_ap, g_ap = pair_distance(f[valid] - f[pos[valid]], metric)
    d_an, g_an = pair_distance(f[valid] - f[neg[valid]], metric)
    hinge = margin + d_ap - d_an
    active = hinge > 0
    value = np.sum(np.where(active, hinge, 0.0)) / valid.size

    grad = np.zeros_like(f)
    w = active[:, None] / valid.size
    np.add.at(grad, valid, w * (g_ap - g_an))
    np.add.at(grad, pos[valid], -w * g_ap)
    np.add.at(grad, neg[valid], w * g_an)
    return LossOutput(float(value), grad)


def anchor_loss(features, labels, anchors: AnchorSet, metric: str = EUCLIDEAN) -> LossOutput:
    """Mean distance of each feature to its class anchor; anchors receive no gradient."""
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    metric = resolve_metric(metric)
    check_labels_covered(anchors, labels)
    d, g = pair_distance(f - anchors.anchors[labels], metric)
    n = f.shape[0]
    return LossOutput(float(d.sum() / n), g / n)


def triplet_anchor_loss(
    features, labels, anchors: AnchorSet, margin: float = 0.0, metric: str = EUCLIDEAN, hinge: bool = True
) -> LossOutput:
    """Own-anchor distance minus nearest other-anchor distance plus margin.

    With ``hinge=False`` the bracket is used signed (it can go negative).
    """
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    metric = resolve_metric(metric)
    check_labels_covered(anchors, labels)
    present = anchors.present
    if present.sum() < 2:
        raise AnchorRegistryError("triplet anchor loss needs anchors for at least two classes")

    dist = distance_matrix(f, anchors.anchors, metric)
    nearest = kernels.nearest_other_anchor(dist, labels, present)
    d_pos, g_pos = pair_distance(f - anchors.anchors[labels], metric)
    d_neg, g_neg = pair_distance(f - anchors.anchors[nearest], metric)
    term = d_pos - d_neg + margin
    n = f.shape[0]
    if hinge:
        active = term > 0
        value = np.sum(np.where(active, term, 0.0)) / n
        grad = active[:, None] * (g_pos - g_neg) / n
    else:
        value = term.sum() / n
        grad = (g_pos - g_neg) / n
    return LossOutput(float(value), grad)


def parametric_center_loss(features, labels, bank: CenterBank) -> LossOutput:
    """Mean squared distance to learnable centers; gradients for features and centers."""
    f = np.asarray(features, dtype=np.float64)
    C = bank.centers.shape[0]
    labels = _check_labels(labels, C)
    diff = f - bank.centers[labels]
    n = f.shape[0]
    value = np.einsum("ij,ij->", diff, diff) / n
    grad_f = 2.0 * diff / n
    grad_c = np.zeros_like(bank.centers)
    np.add.at(grad_c, labels, -grad_f)
    return LossOutput(float(value), grad_f, {"centers": grad_c})


def combine(terms) -> LossOutput:
    """Weighted sum of ``(LossOutput, weight)`` pairs with congruent gradients."""
    terms = list(terms)
    if not terms:
        raise ConfigError("combine needs at least one loss term")
    shape = terms[0][0].grad.shape
    value = 0.0
    grad = np.zeros(shape)
    params = {}
    for out, w in terms:
        if out.grad.shape != shape:
            raise ConfigError(f"gradient shape {out.grad.shape} does not match {shape}")
        value += w * out.value
        grad += w * out.grad
        for k, g in out.grad_params.items():
            if k in params:
                if params[k].shape != g.shape:
                    raise ConfigError(f"parameter gradient {k!r} shapes disagree")
                params[k] = params[k] + w * g
            else:
                params[k] = w * g
    return LossOutput(value, grad, params)
