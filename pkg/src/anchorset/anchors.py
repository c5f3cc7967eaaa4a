"""Class anchors: aggregation over the training set, EMA refresh, update schedules."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .data import atomic_write_text, format_header, parse_header
from .errors import AggregationError, AnchorRegistryError, ConfigError, ParseError

ANCHOR_MAGIC = "anchorset"

FIXED = "fixed"
PER_EPOCH = "per_epoch"
PER_ITERATION = "per_iteration"
SCHEDULES = (FIXED, PER_EPOCH, PER_ITERATION)
_SCHEDULE_ALIASES = {
    "fixed": FIXED, "constant": FIXED,
    "per_epoch": PER_EPOCH, "epoch": PER_EPOCH,
    "per_iteration": PER_ITERATION, "iteration": PER_ITERATION,
}

AVERAGE = "average"
WEIGHTED = "weighted"
AGGREGATIONS = (AVERAGE, WEIGHTED)

EPOCH_END = "epoch_end"
ITERATION_END = "iteration_end"
STAGE2_START = "stage2_start"


@dataclass(frozen=True)
class AnchorSet:
    anchors: np.ndarray  # (C, D)
    counts: np.ndarray  # N_j, samples per class in the training set
    method: str = AVERAGE
    schedule: str = FIXED
    epoch_computed: int = -1

    @property
    def n_classes(self) -> int:
        return self.anchors.shape[0]

    @property
    def dim(self) -> int:
        return self.anchors.shape[1]

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0

    def __eq__(self, other):
        if not isinstance(other, AnchorSet):
            return NotImplemented
        return (
            np.array_equal(self.anchors, other.anchors)
            and np.array_equal(self.counts, other.counts)
            and (self.method, self.schedule, self.epoch_computed)
            == (other.method, other.schedule, other.epoch_computed)
        )


def check_labels_covered(anchors: AnchorSet, labels):
    labels = np.asarray(labels)
    for lab in np.unique(labels):
        if lab < 0 or lab >= anchors.n_classes or not anchors.present[lab]:
            raise AnchorRegistryError(f"no anchor registered for class {int(lab)}")


def resolve_schedule(name: str) -> str:
    try:
        return _SCHEDULE_ALIASES[name]
    except KeyError:
        raise ConfigError(f"unknown anchor schedule {name!r}") from None


def _aggregate(features, labels, weights, n_classes, method):
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=n_classes)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise AggregationError(f"class {int(empty[0])} has no samples to aggregate")
    sums, wsum = kernels.class_sums(features, labels, weights, n_classes)
    zero = np.flatnonzero(wsum <= 0)
    if zero.size:
        raise AggregationError(f"class {int(zero[0])} has zero total aggregation weight")
    return AnchorSet(sums / wsum[:, None], counts, method)


def aggregate_average(features, labels, n_classes: int | None = None) -> AnchorSet:
    """Per-class mean of the features (compensated summation in sample order)."""
    labels = np.asarray(labels, dtype=np.int64)
    return _aggregate(features, labels, np.ones(labels.shape[0]), n_classes, AVERAGE)


def aggregate_weighted(features, labels, probs, n_classes: int | None = None) -> AnchorSet:
    """Per-class mean weighted by each sample's predicted probability of its own class.

    ``probs`` is the (N, C) softmax output; only ``probs[i, labels[i]]`` is used.
    """
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if n_classes is None:
        n_classes = probs.shape[1]
    own = probs[np.arange(labels.shape[0]), labels]
    if np.any(own < 0):
        raise AggregationError("probabilities must be non-negative")
    # rescale by the per-class maximum: the weighted mean is unchanged and
    # equal weights become exactly 1.0, matching aggregate_average bit for bit
    peak = np.zeros(n_classes)
    np.maximum.at(peak, labels, own)
    scale = np.where(peak[labels] > 0, peak[labels], 1.0)
    return _aggregate(features, labels, own / scale, n_classes, WEIGHTED)


def ema_update(anchor_set: AnchorSet, features, labels) -> AnchorSet:
    """One per-iteration refresh with weight ``eta = 1 / N_j``.

    For every class j in the batch with batch count n_j:
    ``a_j <- (1 - eta * n_j) * a_j + eta * sum of batch features of class j``.
    Classes absent from the batch keep their anchor.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    check_labels_covered(anchor_set, labels)
    new = anchor_set.anchors.copy()
    for j in np.unique(labels):
        members = np.flatnonzero(labels == j)
        eta = 1.0 / anchor_set.counts[j]
        total = np.zeros(anchor_set.dim)
        for i in members:
            total = total + features[i]
        new[j] = (1.0 - eta * members.size) * anchor_set.anchors[j] + eta * total
    return replace(anchor_set, anchors=new)


@dataclass(frozen=True)
class UpdateSchedule:
    kind: str
    E_start: int
    E_end: int

    def __post_init__(self):
        object.__setattr__(self, "kind", resolve_schedule(self.kind))
        if not 0 <= self.E_start < self.E_end:
            raise ConfigError("schedule needs 0 <= E_start < E_end")


def schedule_should_update(sched: UpdateSchedule, epoch: int, iteration: int, phase: str) -> bool:
    """Whether anchors are refreshed at this point of training.

    ``stage2_start`` always aggregates (for every schedule). Afterwards
    ``per_epoch`` re-aggregates at each epoch end and ``per_iteration``
    applies the EMA step at each iteration end. Nothing happens before E_start.
    """
    if phase not in (EPOCH_END, ITERATION_END, STAGE2_START):
        raise ConfigError(f"unknown schedule phase {phase!r}")
    if epoch < sched.E_start:
        return False
    if phase == STAGE2_START:
        return True
    if sched.kind == PER_EPOCH:
        return phase == EPOCH_END
    if sched.kind == PER_ITERATION:
        return phase == ITERATION_END
    return False


def write_anchors(anchor_set: AnchorSet, path):
    head = format_header(ANCHOR_MAGIC, anchor_set.n_classes, anchor_set.dim)
    head += f" method={anchor_set.method} schedule={anchor_set.schedule} epoch={anchor_set.epoch_computed}"
    lines = [head]
    for j in range(anchor_set.n_classes):
        vals = ",".join(repr(float(v)) for v in anchor_set.anchors[j])
        lines.append(f"{j},{int(anchor_set.counts[j])},{vals}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_anchors(path) -> AnchorSet:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].strip():
        raise ParseError("missing header", 1)
    C, D, extra = parse_header(lines[0], ANCHOR_MAGIC)
    anchors = np.full((C, D), np.nan)
    counts = np.zeros(C, dtype=np.int64)
    seen = np.zeros(C, dtype=bool)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != D + 2:
            raise ParseError(f"expected {D + 2} fields (class,count,{D} values), got {len(cells)}", lineno)
        try:
            j, n = int(cells[0]), int(cells[1])
            vals = [float(c) for c in cells[2:]]
        except ValueError as exc:
            raise ParseError(f"bad number: {exc}", lineno) from None
        if not 0 <= j < C:
            raise ParseError(f"class id {j} outside [0, {C})", lineno)
        if seen[j]:
            raise ParseError(f"duplicate anchor for class {j}", lineno)
        seen[j] = True
        anchors[j] = vals
        counts[j] = n
    try:
        epoch = int(extra.get("epoch", -1))
    except ValueError:
        raise ParseError("bad epoch field in header", 1) from None
    return AnchorSet(anchors, counts, extra.get("method", AVERAGE), extra.get("schedule", FIXED), epoch)
