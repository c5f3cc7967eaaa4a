"""Two-stage training.

Stage I (epochs ``[0, E_start)``) optimises ``stage1_losses``, by default
classification plus batch-hard triplet. At ``E_start`` anchors are aggregated
from the whole training set and Stage II (epochs ``[E_start, E_end)``)
optimises ``stage2_losses``, refreshing anchors according to ``schedule``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .anchors import (
    AGGREGATIONS, EPOCH_END, ITERATION_END, STAGE2_START, WEIGHTED, AnchorSet, UpdateSchedule,
    aggregate_average, aggregate_weighted, ema_update, resolve_schedule, schedule_should_update,
)
from .data import Dataset
from .encoder import (
    EncoderModel, backward, embed_dataset, forward, init_model, load_checkpoint, save_checkpoint,
)
from .errors import ConfigError, TrainingAbort
from .evaluation import evaluate_retrieval
from .losses import (
    CenterBank, anchor_loss, batch_hard_triplet, cross_entropy_ls, parametric_center_loss,
    resolve_metric, triplet_anchor_loss,
)
from .sampler import PKSpec, pk_epoch, shuffled_epoch

log = logging.getLogger(__name__)

LOSS_NAMES = ("cls", "triplet", "anchor", "triplet_anchor", "center")
ANCHOR_LOSSES = ("anchor", "triplet_anchor")


@dataclass
class TrainConfig:
    stage1_losses: tuple = ("cls", "triplet")
    stage2_losses: tuple = ("cls", "anchor")
    E_start: int = 40
    E_end: int = 60
    aggregation: str = "average"
    schedule: str = "per_epoch"
    metric: str = "euclidean"
    triplet_metric: str = "euclidean"
    triplet_margin: float = 0.3
    anchor_margin: float = 0.0
    anchor_hinge: bool = True
    label_smoothing: float = 0.1
    weights: dict = field(default_factory=lambda: {name: 1.0 for name in LOSS_NAMES})
    base_lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 10
    lr_decay_epochs: tuple = (30,)
    lr_decay_factor: float = 0.1
    lr_reset_stage2: bool = False
    P: int = 16
    K: int = 4
    sampler: str = "pk"
    batch_size: int = 64
    hidden_dims: tuple = ()
    feat_dim: int = 32
    use_neck: bool = True
    center_lr_mult: float = 1.0
    center_init_scale: float = 1.0
    eval_every: int = 5
    seed: int = 0

    def __post_init__(self):
        self.stage1_losses = tuple(self.stage1_losses)
        self.stage2_losses = tuple(self.stage2_losses)
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.weights = {**{name: 1.0 for name in LOSS_NAMES}, **dict(self.weights)}

    def validate(self) -> "TrainConfig":
        for name in (*self.stage1_losses, *self.stage2_losses):
            if name not in LOSS_NAMES:
                raise ConfigError(f"unknown loss {name!r}; choose from {LOSS_NAMES}")
        if not self.stage1_losses or not self.stage2_losses:
            raise ConfigError("each stage needs at least one loss")
        if any(name in ANCHOR_LOSSES for name in self.stage1_losses):
            raise ConfigError("anchor-type losses need aggregated anchors and cannot run in stage 1")
        if not 0 <= self.E_start < self.E_end:
            raise ConfigError("need 0 <= E_start < E_end")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
        self.schedule = resolve_schedule(self.schedule)
        self.metric = resolve_metric(self.metric)
        self.triplet_metric = resolve_metric(self.triplet_metric)
        if any(w < 0 for w in self.weights.values()):
            raise ConfigError("loss weights must be >= 0")
        if self.sampler not in ("pk", "shuffled"):
            raise ConfigError("sampler must be 'pk' or 'shuffled'")
        if self.sampler == "shuffled" and "triplet" in (*self.stage1_losses, *self.stage2_losses):
            raise ConfigError("batch-hard triplet needs the pk sampler")
        if self.base_lr <= 0 or self.warmup_epochs < 0:
            raise ConfigError("base_lr must be > 0 and warmup_epochs >= 0")
        PKSpec(self.P, self.K, self.seed)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, record: dict):
        self.records.append(record)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainLog":
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])

    def __eq__(self, other):
        return isinstance(other, TrainLog) and self.to_jsonl() == other.to_jsonl()


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Linear warm-up from base_lr/10 to base_lr, then step decay at each decay epoch."""
    e = epoch - cfg.E_start if cfg.lr_reset_stage2 and epoch >= cfg.E_start else epoch
    if cfg.warmup_epochs > 0 and e < cfg.warmup_epochs:
        start = cfg.base_lr / 10.0
        return start + (cfg.base_lr - start) * e / cfg.warmup_epochs
    n_decays = sum(1 for d in cfg.lr_decay_epochs if e >= d)
    return cfg.base_lr * cfg.lr_decay_factor ** n_decays


def optimizer_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float, weight_decay: float):
    """In-place momentum SGD with L2 weight decay: ``v = m v + g + wd w; w -= lr v``."""
    for name, w in params.items():
        g = grads[name] + weight_decay * w
        v = velocity.get(name)
        v = g if v is None else momentum * v + g
        velocity[name] = v
        w -= lr * v


def _stage_losses(cfg, epoch):
    return cfg.stage1_losses if epoch < cfg.E_start else cfg.stage2_losses


def _seeds(seed):
    ss = np.random.SeedSequence(int(seed))
    model_seed, sampler_seed, center_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    return model_seed, sampler_seed, center_seed


class Trainer:
    """Holds mutable training state; ``run()`` advances it to ``cfg.E_end``."""

    def __init__(self, cfg: TrainConfig, train: Dataset, eval_pair=None, hooks=()):
        self.cfg = cfg.validate()
        self.train_ds = train
        self.eval_pair = eval_pair
        self.hooks = list(hooks)
        model_seed, self.sampler_seed, center_seed = _seeds(cfg.seed)
        self.model = init_model(
            train.dim, cfg.hidden_dims, cfg.feat_dim, train.n_classes, cfg.use_neck, model_seed
        )
        self.velocity: dict = {}
        self.bank = None
        self.bank_velocity = None
        if "center" in (*cfg.stage1_losses, *cfg.stage2_losses):
            self.bank = CenterBank.random(
                train.n_classes, cfg.feat_dim, center_seed, cfg.center_init_scale, cfg.center_lr_mult
            )
        self.anchors: AnchorSet | None = None
        self.next_epoch = 0
        self.log = TrainLog()
        # training-set anchor-loss after each Stage-II epoch, see anchor_loss_trend()
        self.anchor_loss_history: list = []

    # -- anchors ---------------------------------------------------------
    def aggregate(self, epoch: int) -> AnchorSet:
        emb = embed_dataset(self.model, self.train_ds)
        n = self.train_ds.n_classes
        if self.cfg.aggregation == WEIGHTED:
            anchors = aggregate_weighted(emb.features, emb.labels, emb.probs, n)
        else:
            anchors = aggregate_average(emb.features, emb.labels, n)
        return replace(anchors, schedule=self.cfg.schedule, epoch_computed=epoch)

    def _needs_anchors(self, losses):
        return any(name in ANCHOR_LOSSES for name in losses)

    # -- one iteration ---------------------------------------------------
    def _step(self, idx, losses, lr, epoch, iteration):
        cfg = self.cfg
        x = self.train_ds.x[idx]
        y = self.train_ds.y[idx]
        cache = forward(self.model, x, train=True)
        w = cfg.weights
        parts = {}
        grad_f = np.zeros_like(cache.features)
        grad_logits = None
        grad_centers = None

        if "cls" in losses:
            out = cross_entropy_ls(cache.logits, y, cfg.label_smoothing)
            parts["cls"] = out.value
            grad_logits = w["cls"] * out.grad
        if "triplet" in losses:
            out = batch_hard_triplet(cache.features, y, cfg.triplet_margin, cfg.triplet_metric)
            parts["triplet"] = out.value
            grad_f += w["triplet"] * out.grad
        if "anchor" in losses:
            out = anchor_loss(cache.features, y, self.anchors, cfg.metric)
            parts["anchor"] = out.value
            grad_f += w["anchor"] * out.grad
        if "triplet_anchor" in losses:
            out = triplet_anchor_loss(
                cache.features, y, self.anchors, cfg.anchor_margin, cfg.metric, cfg.anchor_hinge
            )
            parts["triplet_anchor"] = out.value
            grad_f += w["triplet_anchor"] * out.grad
        if "center" in losses:
            out = parametric_center_loss(cache.features, y, self.bank)
            parts["center"] = out.value
            grad_f += w["center"] * out.grad
            grad_centers = w["center"] * out.grad_params["centers"]

        total = sum(w[k] * v for k, v in parts.items())
        if not math.isfinite(total):
            raise TrainingAbort(
                f"non-finite loss at epoch {epoch}, iteration {iteration}: {parts}", epoch, iteration
            )
        grads = backward(self.model, cache, grad_f, grad_logits)
        optimizer_step(self.model.params, grads, self.velocity, lr, cfg.momentum, cfg.weight_decay)
        if grad_centers is not None:
            if self.bank_velocity is None:
                self.bank_velocity = {}
            optimizer_step(
                {"centers": self.bank.centers}, {"centers": grad_centers}, self.bank_velocity,
                lr * self.bank.lr_mult, cfg.momentum, 0.0,
            )
        return parts, cache.features, y

    def _batches(self, epoch):
        if self.cfg.sampler == "pk":
            # small datasets: P scales down to the number of classes
            P = min(self.cfg.P, self.train_ds.n_classes)
            return pk_epoch(self.train_ds.y, PKSpec(P, self.cfg.K, self.sampler_seed), epoch)
        return shuffled_epoch(len(self.train_ds), self.cfg.batch_size, self.sampler_seed, epoch)

    # -- epochs ----------------------------------------------------------
    def run_epoch(self, epoch: int) -> dict:
        cfg = self.cfg
        sched = UpdateSchedule(cfg.schedule, cfg.E_start, cfg.E_end)
        stage = 1 if epoch < cfg.E_start else 2
        losses = _stage_losses(cfg, epoch)
        use_anchors = stage == 2 and self._needs_anchors(losses)
        updated = False

        if use_anchors and (self.anchors is None or epoch == cfg.E_start):
            # entering Stage II (also on resume): full aggregation over the training set
            if schedule_should_update(sched, epoch, 0, STAGE2_START):
                self.anchors = self.aggregate(epoch)
                updated = True

        lr = lr_at(cfg, epoch)
        sums: dict = {}
        batches = self._batches(epoch)
        for it, idx in enumerate(batches):
            parts, feats, y = self._step(idx, losses, lr, epoch, it)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            if use_anchors and schedule_should_update(sched, epoch, it, ITERATION_END):
                self.anchors = ema_update(self.anchors, feats, y)
                updated = True

        if use_anchors and schedule_should_update(sched, epoch, len(batches) - 1, EPOCH_END):
            self.anchors = self.aggregate(epoch)
            updated = True

        if use_anchors and "anchor" in losses:
            emb = embed_dataset(self.model, self.train_ds)
            fresh = aggregate_average(emb.features, emb.labels, self.train_ds.n_classes)
            self.anchor_loss_history.append(anchor_loss(emb.features, emb.labels, fresh, cfg.metric).value)

        report = None
        if self.eval_pair is not None and ((epoch + 1) % cfg.eval_every == 0 or epoch == cfg.E_end - 1):
            q, g = self.eval_pair
            r = evaluate_retrieval(self.model, q, g)
            report = {"rank1": r.rank1, "mAP": r.mAP}

        record = {
            "epoch": epoch,
            "stage": stage,
            "lr": lr,
            "losses": {k: v / len(batches) for k, v in sums.items()},
            "anchors_updated": updated,
            "eval": report,
        }
        self.log.append(record)
        self.next_epoch = epoch + 1
        for hook in self.hooks:
            hook(self, epoch)
        return record

    def run(self) -> tuple[EncoderModel, TrainLog]:
        while self.next_epoch < self.cfg.E_end:
            self.run_epoch(self.next_epoch)
        return self.model, self.log

    # -- checkpoints -----------------------------------------------------
    def save(self, path):
        arrays = {f"velocity/{k}": v for k, v in self.velocity.items()}
        meta = {
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "next_epoch": self.next_epoch,
            "log": self.log.records,
            "anchor_loss_history": self.anchor_loss_history,
        }
        if self.bank is not None:
            arrays["centers"] = self.bank.centers
            for k, v in (self.bank_velocity or {}).items():
                arrays[f"center_velocity/{k}"] = v
        if self.anchors is not None:
            arrays["anchors"] = self.anchors.anchors
            arrays["anchor_counts"] = self.anchors.counts
            meta["anchor_provenance"] = [
                self.anchors.method, self.anchors.schedule, self.anchors.epoch_computed
            ]
        save_checkpoint(path, self.model, arrays, meta)

    def load_state(self, path):
        model, arrays, meta = load_checkpoint(path)
        if model.in_dim != self.train_ds.dim or model.n_classes != self.train_ds.n_classes:
            raise ConfigError("checkpoint model does not match the training data dimensions")
        self.model = model
        self.velocity = {k[len("velocity/"):]: v for k, v in arrays.items() if k.startswith("velocity/")}
        if "centers" in arrays:
            self.bank = CenterBank(arrays["centers"], self.cfg.center_lr_mult)
            cv = {k[len("center_velocity/"):]: v for k, v in arrays.items() if k.startswith("center_velocity/")}
            self.bank_velocity = cv or None
        if "anchors" in arrays:
            method, schedule, epoch = meta["anchor_provenance"]
            self.anchors = AnchorSet(arrays["anchors"], arrays["anchor_counts"], method, schedule, epoch)
        self.next_epoch = int(meta["next_epoch"])
        self.log = TrainLog(list(meta["log"]))
        self.anchor_loss_history = list(meta.get("anchor_loss_history", []))
        return meta


def train(cfg: TrainConfig, train: Dataset, eval_pair=None, hooks=()) -> tuple[EncoderModel, TrainLog]:
    return Trainer(cfg, train, eval_pair, hooks).run()


def resume(checkpoint_path, cfg: TrainConfig, train: Dataset, eval_pair=None, stage2_only=False, hooks=()):
    """Continue training from a checkpoint.

    With ``stage2_only`` Stage II starts at the checkpoint's epoch: ``E_start``
    is moved there and ``E_end`` keeps the configured Stage-II length.
    Anchors are aggregated from the loaded model on entry to Stage II.
    Returns the :class:`Trainer` after running it.
    """
    _, _, meta = load_checkpoint(checkpoint_path)
    start = int(meta["next_epoch"])
    if stage2_only:
        length = cfg.E_end - cfg.E_start
        cfg = replace(cfg, E_start=start, E_end=start + length)
    if start >= cfg.E_end:
        raise ConfigError(f"checkpoint is at epoch {start}, nothing left to train before E_end={cfg.E_end}")
    trainer = Trainer(cfg, train, eval_pair, hooks)
    trainer.load_state(checkpoint_path)
    if stage2_only:
        # stale anchors from the checkpoint must not shortcut the Stage-II aggregation
        trainer.anchors = None
        if trainer.bank is None and "center" in cfg.stage2_losses:
            _, _, center_seed = _seeds(cfg.seed)
            trainer.bank = CenterBank.random(
                train.n_classes, cfg.feat_dim, center_seed, cfg.center_init_scale, cfg.center_lr_mult
            )
    trainer.run()
    return trainer


def anchor_loss_trend(history, tolerance: float = 0.05) -> list[int]:
    """Epoch offsets (from the second Stage-II epoch on) where the anchor loss rose beyond tolerance."""
    bad = []
    for i in range(2, len(history)):
        if history[i] > history[i - 1] * (1.0 + tolerance):
            bad.append(i)
    return bad
