"""Datasets, the synthetic clustered-data generator, splitting and text I/O."""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigError, ParseError, SplitError

SPLITS = ("train", "query", "gallery")
HEADER_MAGIC = "anchorset-dataset"
HEADER_VERSION = "v1"


@dataclass(frozen=True)
class LabeledSample:
    x: np.ndarray
    y: int
    group: int = 0


@dataclass(eq=False)
class Dataset:
    """Samples stored column-wise: ``x`` is (N, D_in), ``y`` and ``groups`` are (N,)."""

    x: np.ndarray
    y: np.ndarray
    groups: np.ndarray
    n_classes: int
    split_tag: str = "train"
    # generator bookkeeping (e.g. class centers); never serialized or compared
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        self.groups = np.ascontiguousarray(self.groups, dtype=np.int64)
        if self.x.ndim != 2:
            raise ConfigError("x must be a 2-d array")
        n = self.x.shape[0]
        if self.y.shape != (n,) or self.groups.shape != (n,):
            raise ConfigError("x, y and groups must have matching lengths")
        if self.split_tag not in SPLITS:
            raise ConfigError(f"unknown split tag {self.split_tag!r}")
        if n and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ConfigError(f"labels must lie in [0, {self.n_classes})")
        if n and self.groups.min() < 0:
            raise ConfigError("group ids must be non-negative")
        if self.split_tag == "train":
            missing = np.setdiff1d(np.arange(self.n_classes), self.y)
            if missing.size:
                raise ConfigError(f"train split has no samples of class {int(missing[0])}")

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.x[i], int(self.y[i]), int(self.groups[i]))

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.n_classes == other.n_classes
            and self.split_tag == other.split_tag
            and self.x.shape == other.x.shape
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.groups, other.groups)
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)

    def subset(self, idx, split_tag: str) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.groups[idx], self.n_classes, split_tag)


@dataclass(frozen=True)
class SyntheticSpec:
    C: int = 50
    D_in: int = 32
    per_class: int = 30
    cluster_spread: float = 1.0
    center_spread: float = 1.0
    noise_dims: int = 16
    seed: int = 0
    # scale of the label-independent coordinates; None means center_spread
    noise_spread: float | None = None
    n_groups: int = 2

    def validate(self):
        if self.C < 1:
            raise ConfigError("C must be >= 1")
        if self.per_class < 2:
            raise ConfigError("per_class must be >= 2")
        if not self.cluster_spread > 0:
            raise ConfigError("cluster_spread must be > 0")
        if not self.center_spread > 0:
            raise ConfigError("center_spread must be > 0")
        if not 0 <= self.noise_dims < self.D_in:
            raise ConfigError("noise_dims must lie in [0, D_in)")
        if self.noise_spread is not None and self.noise_spread < 0:
            raise ConfigError("noise_spread must be >= 0")
        if self.n_groups < 1:
            raise ConfigError("n_groups must be >= 1")


def generate_synthetic(spec: SyntheticSpec, split_tag: str = "train") -> Dataset:
    """Draw ``per_class`` samples around each of ``C`` random class centers.

    The first ``D_in - noise_dims`` coordinates carry the class signal; the
    remaining ones are label-independent gaussian noise. Samples are ordered by
    class. The centers (padded with zeros over the noise coordinates) are kept
    in ``dataset.meta["centers"]``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    signal = spec.D_in - spec.noise_dims
    centers = np.zeros((spec.C, spec.D_in))
    centers[:, :signal] = rng.normal(0.0, spec.center_spread, size=(spec.C, signal))

    n = spec.C * spec.per_class
    y = np.repeat(np.arange(spec.C), spec.per_class)
    x = np.empty((n, spec.D_in))
    x[:, :signal] = centers[y, :signal] + spec.cluster_spread * rng.standard_normal((n, signal))
    noise_spread = spec.center_spread if spec.noise_spread is None else spec.noise_spread
    x[:, signal:] = noise_spread * rng.standard_normal((n, spec.noise_dims))
    groups = np.tile(np.arange(spec.per_class) % spec.n_groups, spec.C)
    return Dataset(x, y, groups, spec.C, split_tag, meta={"centers": centers, "spec": spec})


def split_query_gallery(d: Dataset, queries_per_class: int, seed: int) -> tuple[Dataset, Dataset]:
    """Move ``queries_per_class`` random samples of every class into a query split."""
    if queries_per_class < 1:
        raise ConfigError("queries_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    query_idx = []
    for c in range(d.n_classes):
        members = np.flatnonzero(d.y == c)
        if members.size <= queries_per_class:
            raise SplitError(
                f"class {c} has {members.size} samples, needs more than {queries_per_class}"
            )
        query_idx.append(rng.choice(members, size=queries_per_class, replace=False))
    q = np.sort(np.concatenate(query_idx))
    g = np.setdiff1d(np.arange(len(d)), q)
    return d.subset(q, "query"), d.subset(g, "gallery")


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

def format_header(magic: str, C: int, D: int, split_tag: str | None = None) -> str:
    head = f"{magic} {HEADER_VERSION} C={C} D={D}"
    if split_tag is not None:
        head += f" split={split_tag}"
    return head


def parse_header(line: str, magic: str) -> tuple[int, int, dict]:
    parts = line.split()
    if len(parts) < 4 or parts[0] != magic:
        raise ParseError(f"malformed header, expected '{magic} {HEADER_VERSION} C=<C> D=<D>'", 1)
    if parts[1] != HEADER_VERSION:
        raise ParseError(f"unsupported version {parts[1]!r}", 1)
    fields = {}
    for tok in parts[2:]:
        key, sep, val = tok.partition("=")
        if not sep:
            raise ParseError(f"malformed header token {tok!r}", 1)
        fields[key] = val
    try:
        C, D = int(fields.pop("C")), int(fields.pop("D"))
    except (KeyError, ValueError):
        raise ParseError("header must carry integer C= and D= fields", 1) from None
    if C < 1 or D < 1:
        raise ParseError("header C and D must be positive", 1)
    return C, D, fields


def atomic_write_text(path, text: str):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(d: Dataset, path):
    lines = [format_header(HEADER_MAGIC, d.n_classes, d.dim, d.split_tag)]
    for i in range(len(d)):
        vals = ",".join(repr(float(v)) for v in d.x[i])
        lines.append(f"{int(d.y[i])},{int(d.groups[i])},{vals}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_dataset(path) -> Dataset:
    with open(path) as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ParseError("missing header", 1)
    C, D, extra = parse_header(lines[0], HEADER_MAGIC)
    split_tag = extra.get("split", "train")
    if split_tag not in SPLITS:
        raise ParseError(f"unknown split tag {split_tag!r}", 1)

    xs, ys, gs = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != D + 2:
            raise ParseError(f"expected {D + 2} fields (y,group,{D} values), got {len(cells)}", lineno)
        try:
            y, g = int(cells[0]), int(cells[1])
            x = [float(c) for c in cells[2:]]
        except ValueError as exc:
            raise ParseError(f"bad number: {exc}", lineno) from None
        if not 0 <= y < C:
            raise ParseError(f"class id {y} outside [0, {C})", lineno)
        if g < 0:
            raise ParseError(f"negative group id {g}", lineno)
        xs.append(x)
        ys.append(y)
        gs.append(g)
    x = np.array(xs, dtype=np.float64).reshape(len(xs), D)
    try:
        return Dataset(x, np.array(ys, dtype=np.int64), np.array(gs, dtype=np.int64), C, split_tag)
    except ConfigError as exc:
        raise ParseError(str(exc)) from None
