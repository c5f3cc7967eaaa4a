"""Fully connected encoder with hand-written backward pass.

Layout: ``x -> [affine -> relu] * (L-1) -> affine -> f`` then an optional
per-dimension normalisation neck ``h = gamma * (f - mu) / sqrt(var + eps) + beta``
and a bias-free linear classifier ``logits = h @ P.T``.

Metric losses consume the pre-neck features ``f``; the classification loss
consumes the logits. ``backward`` sums both paths.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import CheckpointError, ConfigError

NECK_EPS = 1e-5
NECK_MOMENTUM = 0.1
CHECKPOINT_MAGIC = "anchorset-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderModel:
    params: dict
    n_layers: int
    feat_dim: int
    n_classes: int
    use_neck: bool
    running_mean: np.ndarray
    running_var: np.ndarray
    rng_seed: int = 0

    @property
    def in_dim(self) -> int:
        return self.params["W0"].shape[0]

    @property
    def hidden_dims(self) -> list[int]:
        return [self.params[f"W{i}"].shape[1] for i in range(self.n_layers - 1)]

    def param_names(self) -> list[str]:
        return list(self.params)

    def copy(self) -> "EncoderModel":
        return EncoderModel(
            {k: v.copy() for k, v in self.params.items()},
            self.n_layers,
            self.feat_dim,
            self.n_classes,
            self.use_neck,
            self.running_mean.copy(),
            self.running_var.copy(),
            self.rng_seed,
        )


@dataclass
class ForwardCache:
    inputs: list  # input to each affine layer
    pre: list  # affine output of each layer
    features: np.ndarray
    necked: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    train: bool
    xhat: np.ndarray | None = None
    inv_std: np.ndarray | None = None


@dataclass
class EmbeddingBatch:
    features: np.ndarray
    labels: np.ndarray
    probs: np.ndarray | None = None
    groups: np.ndarray | None = field(default=None)


def init_model(D_in, hidden_dims, feat_dim, C, use_neck=True, seed=0) -> EncoderModel:
    dims = [int(D_in), *[int(h) for h in hidden_dims], int(feat_dim)]
    if min(dims) < 1 or C < 1:
        raise ConfigError("all dimensions and the class count must be >= 1")
    rng = np.random.default_rng(seed)
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"W{i}"] = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        params[f"b{i}"] = np.zeros(fan_out)
    if use_neck:
        params["gamma"] = np.ones(feat_dim)
        params["beta"] = np.zeros(feat_dim)
    params["classifier"] = rng.standard_normal((C, feat_dim)) * np.sqrt(1.0 / feat_dim)
    return EncoderModel(
        params, len(dims) - 1, int(feat_dim), int(C), bool(use_neck),
        np.zeros(feat_dim), np.ones(feat_dim), int(seed),
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: EncoderModel, x, train: bool = False, update_stats: bool | None = None) -> ForwardCache:
    """Run the encoder on a batch.

    In train mode the neck normalises with batch statistics and, unless
    ``update_stats`` is False, folds them into the running statistics.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigError("forward expects a nonempty 2-d batch")
    if x.shape[1] != model.in_dim:
        raise ConfigError(f"input dim {x.shape[1]} does not match model input dim {model.in_dim}")
    if update_stats is None:
        update_stats = train

    p = model.params
    inputs, pre = [], []
    a = x
    for i in range(model.n_layers):
        inputs.append(a)
        z = a @ p[f"W{i}"] + p[f"b{i}"]
        pre.append(z)
        a = np.maximum(z, 0.0) if i < model.n_layers - 1 else z
    f = a

    xhat = inv_std = None
    if model.use_neck:
        if train:
            mu = f.mean(axis=0)
            var = f.var(axis=0)
            if update_stats:
                n = f.shape[0]
                unbiased = var * n / (n - 1) if n > 1 else var
                model.running_mean = (1 - NECK_MOMENTUM) * model.running_mean + NECK_MOMENTUM * mu
                model.running_var = (1 - NECK_MOMENTUM) * model.running_var + NECK_MOMENTUM * unbiased
        else:
            mu, var = model.running_mean, model.running_var
        inv_std = 1.0 / np.sqrt(var + NECK_EPS)
        xhat = (f - mu) * inv_std
        h = p["gamma"] * xhat + p["beta"]
    else:
        h = f

    logits = h @ p["classifier"].T
    return ForwardCache(inputs, pre, f, h, logits, softmax(logits), train, xhat, inv_std)


def backward(model: EncoderModel, cache: ForwardCache, grad_features=None, grad_logits=None) -> dict:
    """Gradients of a loss whose partials w.r.t. ``f`` and ``logits`` are given.

    The cache must come from ``forward`` on the unchanged model.
    """
    p = model.params
    n = cache.features.shape[0]
    grads = {k: np.zeros_like(v) for k, v in p.items()}

    df = np.zeros_like(cache.features) if grad_features is None else np.array(grad_features, dtype=np.float64)
    if grad_logits is not None:
        gl = np.asarray(grad_logits, dtype=np.float64)
        grads["classifier"] = gl.T @ cache.necked
        dh = gl @ p["classifier"]
        if model.use_neck:
            grads["gamma"] = (dh * cache.xhat).sum(axis=0)
            grads["beta"] = dh.sum(axis=0)
            dxhat = dh * p["gamma"]
            if cache.train:
                df += cache.inv_std / n * (
                    n * dxhat - dxhat.sum(axis=0) - cache.xhat * (dxhat * cache.xhat).sum(axis=0)
                )
            else:
                df += dxhat * cache.inv_std
        else:
            df += dh

    da = df
    for i in reversed(range(model.n_layers)):
        if i < model.n_layers - 1:
            da = da * (cache.pre[i] > 0)
        grads[f"W{i}"] = cache.inputs[i].T @ da
        grads[f"b{i}"] = da.sum(axis=0)
        if i > 0:
            da = da @ p[f"W{i}"].T
    return grads


def embed_dataset(model: EncoderModel, dataset: Dataset, batch_size: int = 1024) -> EmbeddingBatch:
    """Inference-mode features and class probabilities for every sample, in order."""
    if dataset.dim != model.in_dim:
        raise ConfigError(f"dataset dim {dataset.dim} does not match model input dim {model.in_dim}")
    feats, probs = [], []
    for start in range(0, len(dataset), batch_size):
        cache = forward(model, dataset.x[start:start + batch_size], train=False)
        feats.append(cache.features)
        probs.append(cache.probs)
    return EmbeddingBatch(np.concatenate(feats), dataset.y.copy(), np.concatenate(probs), dataset.groups.copy())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: EncoderModel, arrays: dict | None = None, meta: dict | None = None):
    """Write model tensors plus extra ``arrays`` and JSON ``meta`` atomically (npz)."""
    header = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "n_layers": model.n_layers,
        "feat_dim": model.feat_dim,
        "n_classes": model.n_classes,
        "use_neck": model.use_neck,
        "rng_seed": model.rng_seed,
        "param_names": list(model.params),
        "meta": meta or {},
    }
    payload = {"__header__": np.array(json.dumps(header, sort_keys=True))}
    for k, v in model.params.items():
        payload[f"param/{k}"] = v
    payload["neck/running_mean"] = model.running_mean
    payload["neck/running_var"] = model.running_var
    for k, v in (arrays or {}).items():
        payload[f"extra/{k}"] = np.asarray(v)

    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".npz")
    os.close(fd)
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[EncoderModel, dict, dict]:
    """Return ``(model, arrays, meta)``; validates the magic string and version."""
    try:
        with np.load(path, allow_pickle=False) as z:
            contents = {k: z[k] for k in z.files}
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    except (ValueError, OSError) as exc:
        raise CheckpointError(f"not a readable checkpoint: {path}: {exc}") from exc
    try:
        header = json.loads(str(contents.pop("__header__")))
    except (KeyError, ValueError):
        raise CheckpointError(f"{path}: missing checkpoint header") from None
    if header.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {header.get('magic')!r}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')!r}")

    params = {k: contents[f"param/{k}"] for k in header["param_names"]}
    model = EncoderModel(
        params,
        header["n_layers"],
        header["feat_dim"],
        header["n_classes"],
        header["use_neck"],
        contents["neck/running_mean"],
        contents["neck/running_var"],
        header["rng_seed"],
    )
    arrays = {k[len("extra/"):]: v for k, v in contents.items() if k.startswith("extra/")}
    return model, arrays, header["meta"]
