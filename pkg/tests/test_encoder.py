import numpy as np
import pytest

from anchorset.data import Dataset
from anchorset.encoder import (
    backward, embed_dataset, forward, init_model, load_checkpoint, save_checkpoint,
)
from anchorset.errors import CheckpointError, ConfigError
from helpers import LOSSES, encoder_gradcheck


def test_zero_weights_give_uniform_probabilities(rng):
    m = init_model(4, (5,), 3, 6, seed=0)
    for k in m.params:
        m.params[k][...] = 0.0
    cache = forward(m, rng.standard_normal((7, 4)))
    np.testing.assert_allclose(cache.probs, 1.0 / 6)
    assert np.all(cache.logits == cache.logits[:, :1])


def test_identity_single_layer():
    m = init_model(2, (), 2, 3, use_neck=False, seed=0)
    m.params["W0"] = np.eye(2)
    cache = forward(m, np.array([[1.0, 2.0]]))
    np.testing.assert_array_equal(cache.features, [[1.0, 2.0]])


def test_probs_are_distributions(rng):
    m = init_model(5, (8,), 4, 7, seed=3)
    p = forward(m, 10 * rng.standard_normal((20, 5))).probs
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_zero_upstream_gives_zero_grads(rng):
    m = init_model(5, (8,), 4, 3, seed=1)
    cache = forward(m, rng.standard_normal((6, 5)), train=True)
    grads = backward(m, cache, np.zeros((6, 4)), np.zeros((6, 3)))
    assert set(grads) == set(m.params)
    for g in grads.values():
        assert not np.any(g)


def test_train_forward_updates_running_stats_only_when_asked(rng):
    m = init_model(3, (), 4, 2, seed=0)
    x = rng.standard_normal((8, 3))
    forward(m, x, train=True, update_stats=False)
    np.testing.assert_array_equal(m.running_mean, 0.0)
    cache = forward(m, x, train=True)
    np.testing.assert_allclose(m.running_mean, 0.1 * cache.features.mean(axis=0))
    np.testing.assert_allclose(m.running_var, 0.9 + 0.1 * cache.features.var(axis=0, ddof=1))


def test_classifier_gradient_formula(rng):
    m = init_model(4, (), 3, 5, seed=2)
    cache = forward(m, rng.standard_normal((6, 4)), train=True)
    gl = rng.standard_normal((6, 5))
    grads = backward(m, cache, None, gl)
    np.testing.assert_allclose(grads["classifier"], gl.T @ cache.necked)


def test_without_neck_logits_use_features(rng):
    m = init_model(4, (6,), 3, 5, use_neck=False, seed=2)
    cache = forward(m, rng.standard_normal((6, 4)), train=True)
    np.testing.assert_allclose(cache.logits, cache.features @ m.params["classifier"].T)
    assert "gamma" not in m.params


@pytest.mark.parametrize("loss", LOSSES)
def test_gradients_match_finite_differences(loss):
    rng = np.random.default_rng(LOSSES.index(loss))
    worst = max(max(encoder_gradcheck(loss, rng).values()) for _ in range(5))
    assert worst <= 1e-4


def test_gradients_without_neck(rng):
    from anchorset.losses import anchor_loss
    from anchorset.anchors import AnchorSet
    from helpers import numeric_grad, rel_error

    m = init_model(4, (5,), 3, 3, use_neck=False, seed=9)
    x = rng.standard_normal((6, 4))
    y = np.array([0, 0, 1, 1, 2, 2])
    anchors = AnchorSet(rng.standard_normal((3, 3)), np.ones(3, dtype=int))

    def value():
        return anchor_loss(forward(m, x, train=True).features, y, anchors).value

    out = anchor_loss(forward(m, x, train=True).features, y, anchors)
    grads = backward(m, forward(m, x, train=True), out.grad, None)
    for k, arr in m.params.items():
        assert rel_error(grads[k], numeric_grad(value, arr)) <= 1e-4


def test_input_dim_mismatch(rng):
    m = init_model(4, (), 3, 2)
    with pytest.raises(ConfigError):
        forward(m, np.zeros((2, 5)))


def test_embed_dataset_matches_inference_forward(rng):
    m = init_model(3, (4,), 2, 2, seed=5)
    d = Dataset(rng.standard_normal((10, 3)), [0, 1] * 5, np.zeros(10), 2)
    emb = embed_dataset(m, d, batch_size=3)
    np.testing.assert_allclose(emb.features, forward(m, d.x).features, rtol=0, atol=1e-14)
    np.testing.assert_array_equal(emb.labels, d.y)


def test_checkpoint_round_trip(tmp_path, rng):
    m = init_model(3, (4,), 2, 5, seed=5)
    m.running_mean = rng.standard_normal(2)
    path = tmp_path / "m.npz"
    save_checkpoint(path, m, {"extra": np.arange(3)}, {"note": "x"})
    m2, arrays, meta = load_checkpoint(path)
    assert m2.n_layers == m.n_layers and m2.use_neck
    for k in m.params:
        np.testing.assert_array_equal(m.params[k], m2.params[k])
    np.testing.assert_array_equal(m2.running_mean, m.running_mean)
    np.testing.assert_array_equal(arrays["extra"], np.arange(3))
    assert meta == {"note": "x"}


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.npz")
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    wrong = tmp_path / "wrong.npz"
    np.savez(wrong, __header__=np.array('{"magic": "other", "version": 1}'))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(wrong)
