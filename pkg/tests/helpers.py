"""Shared oracles for the test-suite."""
import numpy as np

from anchorset.anchors import AnchorSet
from anchorset.encoder import backward, forward, init_model
from anchorset.losses import (
    CenterBank, anchor_loss, batch_hard_triplet, cross_entropy_ls, parametric_center_loss,
    triplet_anchor_loss,
)

# criterion number -> (passed, detail), printed in the terminal summary
ACCEPTANCE_RESULTS = {}

LOSSES = ("cls", "triplet", "anchor", "triplet_anchor", "center")


def numeric_grad(f, arr, step=1e-5):
    """Central differences of scalar ``f()`` w.r.t. ``arr``, perturbed in place."""
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + step
        hi = f()
        arr[idx] = orig - step
        lo = f()
        arr[idx] = orig
        g[idx] = (hi - lo) / (2 * step)
    return g


def rel_error(analytic, numeric, floor=1e-4):
    """Norm-wise relative error; ``floor`` keeps exactly-zero gradients from dividing noise by noise."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def random_instance(rng):
    """Small model plus a batch where every label appears at least twice."""
    D_in = int(rng.integers(3, 7))
    feat_dim = int(rng.integers(2, 17))
    C = int(rng.integers(2, 5))
    hidden = () if rng.random() < 0.5 else (int(rng.integers(3, 7)),)
    model = init_model(D_in, hidden, feat_dim, C, use_neck=True, seed=int(rng.integers(1 << 30)))
    model.params["gamma"] += 0.3 * rng.standard_normal(feat_dim)
    model.params["beta"] += 0.3 * rng.standard_normal(feat_dim)
    n = int(rng.integers(4, 9))
    y = np.concatenate([[0, 0, 1, 1], rng.integers(0, C, size=n - 4)])
    x = rng.standard_normal((n, D_in))
    return model, x, y


def loss_on_batch(name, model, x, y, extras):
    """Loss value plus the upstream partials (on f, on logits, on centers)."""
    cache = forward(model, x, train=True, update_stats=False)
    gf = gl = gc = None
    if name == "cls":
        out = cross_entropy_ls(cache.logits, y, 0.1)
        gl = out.grad
    elif name == "triplet":
        out = batch_hard_triplet(cache.features, y, margin=extras["margin"])
        gf = out.grad
    elif name == "anchor":
        out = anchor_loss(cache.features, y, extras["anchors"])
        gf = out.grad
    elif name == "triplet_anchor":
        out = triplet_anchor_loss(cache.features, y, extras["anchors"], margin=extras["margin"])
        gf = out.grad
    elif name == "center":
        out = parametric_center_loss(cache.features, y, extras["bank"])
        gf, gc = out.grad, out.grad_params["centers"]
    else:
        raise ValueError(name)
    return out.value, cache, gf, gl, gc


def encoder_gradcheck(name, rng, step=1e-5):
    """Max relative error over every parameter tensor for loss ``name`` composed with the encoder."""
    model, x, y = random_instance(rng)
    C, D = model.n_classes, model.feat_dim
    extras = {
        "margin": float(rng.uniform(0.5, 3.0)),
        "anchors": AnchorSet(rng.standard_normal((C, D)), np.full(C, 5)),
        "bank": CenterBank(rng.standard_normal((C, D))),
    }
    _, cache, gf, gl, gc = loss_on_batch(name, model, x, y, extras)
    grads = backward(model, cache, gf, gl)

    def value():
        return loss_on_batch(name, model, x, y, extras)[0]

    errs = {}
    for k, arr in model.params.items():
        errs[k] = rel_error(grads[k], numeric_grad(value, arr, step))
    if name == "center":
        errs["centers"] = rel_error(gc, numeric_grad(value, extras["bank"].centers, step))
    return errs


def brute_force_retrieval(dist, q_labels, g_labels, q_groups, g_groups, exclude_same_group, ks):
    """Exhaustive ranking per query with exact rational AP; returns (rank_at, mAP, dropped)."""
    from fractions import Fraction

    aps, firsts, dropped = [], [], 0
    for i in range(dist.shape[0]):
        keep = [j for j in range(dist.shape[1])
                if not (exclude_same_group and g_labels[j] == q_labels[i] and g_groups[j] == q_groups[i])]
        order = sorted(keep, key=lambda j: (dist[i, j], j))
        hits = [r for r, j in enumerate(order, start=1) if g_labels[j] == q_labels[i]]
        if not hits:
            dropped += 1
            continue
        aps.append(sum(Fraction(m, r) for m, r in enumerate(hits, start=1)) / len(hits))
        firsts.append(hits[0])
    if not aps:
        return {k: 0.0 for k in ks}, 0.0, dropped
    rank_at = {k: float(Fraction(sum(f <= k for f in firsts), len(firsts))) for k in ks}
    return rank_at, float(sum(aps) / len(aps)), dropped
