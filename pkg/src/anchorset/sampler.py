"""Mini-batch index samplers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SamplerError


@dataclass(frozen=True)
class PKSpec:
    P: int = 16
    K: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.P < 2 or self.K < 2:
            raise ConfigError("PK sampling needs P >= 2 and K >= 2")


def _rng(seed, epoch):
    return np.random.default_rng([int(seed), int(epoch)])


def pk_epoch(labels, spec: PKSpec, epoch: int) -> list[np.ndarray]:
    """Batches of P distinct classes x K indices covering every class once per epoch.

    The epoch has ceil(C / P) batches drawn from one seeded class permutation;
    the last batch wraps around to the start of the permutation. Classes with
    fewer than K samples contribute all of them plus draws with replacement.
    """
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if classes.size < spec.P:
        raise SamplerError(f"PK sampling needs at least P={spec.P} classes, dataset has {classes.size}")
    members = {int(c): np.flatnonzero(labels == c) for c in classes}
    rng = _rng(spec.seed, epoch)
    perm = rng.permutation(classes)
    n_batches = -(-classes.size // spec.P)
    cycle = np.concatenate([perm, perm[: n_batches * spec.P - perm.size]])

    batches = []
    for b in range(n_batches):
        idx = []
        for c in cycle[b * spec.P:(b + 1) * spec.P]:
            pool = members[int(c)]
            if pool.size >= spec.K:
                idx.append(rng.choice(pool, size=spec.K, replace=False))
            else:
                extra = rng.choice(pool, size=spec.K - pool.size, replace=True)
                idx.append(np.concatenate([rng.permutation(pool), extra]))
        batches.append(np.concatenate(idx))
    return batches


def shuffled_epoch(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """A seeded permutation of ``range(n)`` cut into chunks; the last may be short."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    perm = _rng(seed, epoch).permutation(int(n))
    return [perm[i:i + batch_size] for i in range(0, int(n), batch_size)]
