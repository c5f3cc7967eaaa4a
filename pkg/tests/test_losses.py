import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from anchorset.anchors import AnchorSet
from anchorset.errors import AnchorRegistryError, ConfigError, DataError, DegenerateBatchError
from anchorset.losses import (
    SQUARED_EUCLIDEAN, CenterBank, LossOutput, anchor_loss, batch_hard_triplet, combine,
    cross_entropy_ls, pair_distance, parametric_center_loss, resolve_metric, triplet_anchor_loss,
)
from helpers import numeric_grad, rel_error


def _anchors(a):
    a = np.asarray(a, dtype=float)
    return AnchorSet(a, np.ones(a.shape[0], dtype=int))


# -- cross entropy -----------------------------------------------------------

def test_ce_uniform_logits():
    out = cross_entropy_ls(np.zeros((4, 7)), [0, 3, 6, 2], 0.0)
    assert out.value == pytest.approx(math.log(7), abs=1e-15)


def test_ce_confident_limit():
    logits = np.array([[800.0, 0.0, 0.0]])
    assert cross_entropy_ls(logits, [0], 0.0).value == pytest.approx(0.0, abs=1e-300)


def test_ce_smoothing_irrelevant_for_uniform_softmax():
    assert cross_entropy_ls(np.zeros((1, 2)), [0], 0.1).value == pytest.approx(math.log(2), abs=1e-15)


def test_ce_smoothed_targets_by_hand():
    logits = np.array([[1.0, -0.5, 2.0]])
    logp = logits - np.log(np.exp(logits).sum())
    target = np.array([0.8, 0.1, 0.1])
    out = cross_entropy_ls(logits, [0], 0.2)
    assert out.value == pytest.approx(-(target * logp).sum(), rel=1e-14)
    np.testing.assert_allclose(out.grad, np.exp(logp) - target, atol=1e-15)


def test_ce_gradient_fd(rng):
    logits = rng.standard_normal((5, 4))
    y = rng.integers(0, 4, 5)
    out = cross_entropy_ls(logits, y, 0.1)
    num = numeric_grad(lambda: cross_entropy_ls(logits, y, 0.1).value, logits)
    assert rel_error(out.grad, num) < 1e-8


def test_ce_errors():
    with pytest.raises(ConfigError):
        cross_entropy_ls(np.zeros((1, 2)), [0], 1.0)
    with pytest.raises(DataError):
        cross_entropy_ls(np.zeros((1, 2)), [2], 0.1)


# -- batch-hard triplet -------------------------------------------------------

def test_triplet_separated_classes():
    f = np.array([[0.0], [0.0], [10.0], [10.0]])
    assert batch_hard_triplet(f, [0, 0, 1, 1], 0.3).value == 0.0


def test_triplet_identical_features():
    out = batch_hard_triplet(np.ones((6, 3)), [0, 0, 1, 1, 2, 2], 0.7)
    assert out.value == pytest.approx(0.7)


def brute_force_batch_hard(f, y, margin, sq=False):
    n = len(y)
    total, count = 0.0, 0
    for i in range(n):
        d = lambda j: float(np.sum((f[i] - f[j]) ** 2)) if sq else float(np.linalg.norm(f[i] - f[j]))
        pos = [d(j) for j in range(n) if j != i and y[j] == y[i]]
        neg = [d(j) for j in range(n) if y[j] != y[i]]
        if pos and neg:
            total += max(0.0, margin + max(pos) - min(neg))
            count += 1
    return total / count


@pytest.mark.parametrize("metric", ["euclidean", "squared_euclidean"])
def test_triplet_matches_brute_force(rng, metric):
    for _ in range(30):
        f = rng.standard_normal((8, 3))
        y = rng.integers(0, 3, 8)
        try:
            got = batch_hard_triplet(f, y, 0.5, metric).value
        except DegenerateBatchError:
            continue
        want = brute_force_batch_hard(f, y, 0.5, metric == "squared_euclidean")
        assert got == pytest.approx(want, rel=1e-12, abs=1e-14)


def test_triplet_degenerate_batches():
    with pytest.raises(DegenerateBatchError):
        batch_hard_triplet(np.zeros((3, 2)), [0, 0, 0])
    with pytest.raises(DegenerateBatchError):
        batch_hard_triplet(np.eye(3), [0, 1, 2])


def test_triplet_singletons_skipped():
    f = np.array([[0.0], [1.0], [5.0]])
    # only samples 0 and 1 have positives; sample 2 is a singleton
    want = (max(0, 0.3 + 1 - 5) + max(0, 0.3 + 1 - 4)) / 2
    assert batch_hard_triplet(f, [0, 0, 1], 0.3).value == pytest.approx(want)


# -- anchor loss -------------------------------------------------------------

def test_anchor_loss_zero_on_anchors():
    a = np.array([[1.0, 2.0], [3.0, -1.0]])
    out = anchor_loss(a[[0, 1, 1]], [0, 1, 1], _anchors(a))
    assert out.value == 0.0
    assert not np.any(out.grad)


def test_anchor_loss_345():
    assert anchor_loss([[3.0, 4.0]], [0], _anchors([[0.0, 0.0]])).value == 5.0


def test_anchor_loss_hand_example():
    out = anchor_loss([[1.0, 0.0], [0.0, 2.0]], [0, 1], _anchors([[0, 0], [0, 0]]))
    assert out.value == 1.5


def test_anchor_loss_missing_class():
    anchors = AnchorSet(np.zeros((3, 2)), np.array([1, 0, 1]))
    with pytest.raises(AnchorRegistryError, match="class 1"):
        anchor_loss(np.zeros((2, 2)), [0, 1], anchors)
    with pytest.raises(AnchorRegistryError, match="class 5"):
        anchor_loss(np.zeros((1, 2)), [5], anchors)


def test_anchor_loss_fd(rng):
    f = rng.standard_normal((6, 4))
    y = rng.integers(0, 3, 6)
    a = _anchors(rng.standard_normal((3, 4)))
    for metric in ("euclidean", "squared_euclidean"):
        out = anchor_loss(f, y, a, metric)
        num = numeric_grad(lambda: anchor_loss(f, y, a, metric).value, f)
        assert rel_error(out.grad, num) < 1e-8


# -- triplet anchor loss -------------------------------------------------------

def test_triplet_anchor_separated():
    a = _anchors([[0.0, 0.0], [1.0, 0.0]])
    assert triplet_anchor_loss([[0.0, 0.0]], [0], a, margin=0.0).value == 0.0


def test_triplet_anchor_equidistant():
    a = _anchors([[0.0, 0.0], [2.0, 0.0]])
    assert triplet_anchor_loss([[1.0, 0.0]], [0], a, margin=0.4).value == pytest.approx(0.4)


def test_triplet_anchor_brute_force(rng):
    for _ in range(50):
        f = rng.standard_normal((4, 3))
        y = rng.integers(0, 3, 4)
        A = rng.standard_normal((3, 3))
        m = float(rng.uniform(0, 2))
        want = 0.0
        for i in range(4):
            own = np.linalg.norm(f[i] - A[y[i]])
            other = min(np.linalg.norm(f[i] - A[k]) for k in range(3) if k != y[i])
            want += max(0.0, own - other + m)
        got = triplet_anchor_loss(f, y, _anchors(A), margin=m).value
        assert got == pytest.approx(want / 4, rel=1e-12, abs=1e-15)


def test_triplet_anchor_signed_variant():
    a = _anchors([[0.0], [1.0]])
    assert triplet_anchor_loss([[0.0]], [0], a, margin=0.0, hinge=False).value == -1.0


def test_triplet_anchor_ignores_absent_classes():
    anchors = AnchorSet(np.array([[0.0], [0.1], [3.0]]), np.array([1, 0, 1]))
    out = triplet_anchor_loss([[0.0]], [0], anchors, margin=0.0)
    assert out.value == 0.0


def test_triplet_anchor_single_class():
    with pytest.raises(AnchorRegistryError):
        triplet_anchor_loss([[0.0]], [0], _anchors([[0.0]]))


# -- parametric center loss --------------------------------------------------

def test_center_loss_examples():
    bank = CenterBank(np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert parametric_center_loss([[0.0, 0.0], [1.0, 1.0]], [0, 1], bank).value == 0.0
    out = parametric_center_loss([[1.0, 0.0]], [0], bank)
    assert out.value == 1.0
    np.testing.assert_array_equal(out.grad, [[2.0, 0.0]])


def test_center_loss_fd(rng):
    f = rng.standard_normal((7, 3))
    y = rng.integers(0, 4, 7)
    bank = CenterBank.random(4, 3, seed=1)
    out = parametric_center_loss(f, y, bank)
    fn = lambda: parametric_center_loss(f, y, bank).value
    assert rel_error(out.grad, numeric_grad(fn, f)) <= 1e-4
    assert rel_error(out.grad_params["centers"], numeric_grad(fn, bank.centers)) <= 1e-4


# -- combine and helpers -----------------------------------------------------

def test_combine_weights_and_params():
    a = LossOutput(1.0, np.ones((2, 2)))
    b = LossOutput(2.0, np.full((2, 2), 3.0), {"centers": np.ones(3)})
    out = combine([(a, 0.5), (b, 2.0)])
    assert out.value == 4.5
    np.testing.assert_array_equal(out.grad, np.full((2, 2), 6.5))
    np.testing.assert_array_equal(out.grad_params["centers"], np.full(3, 2.0))
    with pytest.raises(ConfigError):
        combine([(a, 1.0), (LossOutput(0.0, np.ones(3)), 1.0)])
    with pytest.raises(ConfigError):
        combine([])


def test_metric_aliases():
    assert resolve_metric("sql2") == SQUARED_EUCLIDEAN
    with pytest.raises(ConfigError):
        resolve_metric("cosine")


def test_zero_subgradient_at_coincidence():
    d, g = pair_distance(np.zeros((1, 3)), "euclidean")
    assert d[0] == 0 and not np.any(g)


# -- properties ----------------------------------------------------------------

finite = st.floats(-10, 10, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (6, 3), elements=finite), st.permutations(range(6)), st.floats(0, 2))
def test_batch_losses_permutation_invariant(f, perm, margin):
    y = np.array([0, 0, 1, 1, 2, 2])
    perm = np.array(perm)
    A = _anchors(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]))
    # mining breaks distance ties by index, so the subgradient is order-dependent there
    iu = np.triu_indices(6, k=1)
    dists = np.concatenate([np.linalg.norm(f[:, None] - f[None], axis=2)[iu],
                            np.linalg.norm(f[:, None] - A.anchors[None], axis=2).ravel()])
    ties = np.min(np.diff(np.sort(dists))) < 1e-9
    for fn in (
        lambda f, y: batch_hard_triplet(f, y, margin),
        lambda f, y: anchor_loss(f, y, A),
        lambda f, y: triplet_anchor_loss(f, y, A, margin),
    ):
        base = fn(f, y)
        moved = fn(f[perm], y[perm])
        assert moved.value == pytest.approx(base.value, rel=1e-12, abs=1e-12)
        if not ties:
            np.testing.assert_allclose(moved.grad, base.grad[perm], rtol=1e-12, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (5, 2), elements=finite), arrays(np.float64, (3, 2), elements=finite),
       st.lists(st.integers(0, 2), min_size=5, max_size=5), st.floats(0, 3))
def test_metric_losses_non_negative(f, A, y, margin):
    y = np.array(y)
    anchors = _anchors(A)
    assert anchor_loss(f, y, anchors).value >= 0
    assert triplet_anchor_loss(f, y, anchors, margin).value >= 0
    assert parametric_center_loss(f, y, CenterBank(A)).value >= 0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 5), elements=finite), st.lists(st.integers(0, 4), min_size=4, max_size=4),
       st.floats(0, 0.9))
def test_ce_bounded_below_by_target_entropy(logits, y, eps):
    # cross-entropy against q is at least the entropy of q
    C = 5
    q = np.array([1 - eps] + [eps / (C - 1)] * (C - 1))
    entropy = -sum(v * math.log(v) for v in q if v > 0)
    assert cross_entropy_ls(logits, y, eps).value >= entropy - 1e-9


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 3), elements=finite), arrays(np.float64, (3,), elements=finite))
def test_triplet_translation_invariant(f, shift):
    y = np.array([0, 0, 1, 1])
    base = batch_hard_triplet(f, y, 0.3).value
    assert batch_hard_triplet(f + shift, y, 0.3).value == pytest.approx(base, rel=1e-9, abs=1e-9)
