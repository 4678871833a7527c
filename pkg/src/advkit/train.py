"""Class weighting, data splits and the Adam / early-stopping training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import diffcore as dc
from .epochs import EpochSet
from .metrics import bca, rca
from .models import Model, predict

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int, msg: str = "loss became non-finite"):
        super().__init__(f"training diverged at epoch {epoch}: {msg}")
        self.epoch = epoch


class SplitError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    class_weighting: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("learning rate, batch size, max epochs and patience must be positive")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if not all(0 < b < 1 for b in self.betas):
            raise ValueError("Adam betas must lie in (0, 1)")
        self.betas = tuple(self.betas)


def class_weights(labels, n_classes: int | None = None) -> np.ndarray:
    """Normalized inverse-frequency weights ``w_c = N / (K * n_c)``."""
    labels = np.asarray(labels, dtype=np.int64)
    labels = labels[labels >= 0]
    k = int(n_classes) if n_classes is not None else int(labels.max()) + 1
    counts = np.bincount(labels, minlength=k)[:k]
    if np.any(counts == 0):
        raise ValueError(f"class(es) {np.flatnonzero(counts == 0).tolist()} have no examples")
    return len(labels) / (k * counts)


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------

SPLIT_KINDS = ("within", "loso", "mixed", "groupab")


@dataclass
class SplitPlan:
    """How epochs are divided.

    ``within``: per subject, test fraction then a validation share of the rest.
    ``loso``: one fold per subject; remaining subjects mixed into train/val.
    ``mixed``: all subjects pooled, then split like ``within``.
    ``groupab``: ``group_b_subjects`` become attacker seed data; group A is split like ``mixed``.
    """

    kind: str = "within"
    test_fraction: float = 0.2
    val_fraction: float = 0.25
    group_b_subjects: list = field(default_factory=list)

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in SPLIT_KINDS:
            raise SplitError(f"unknown split kind {self.kind!r}; choose from {SPLIT_KINDS}")
        if not (0 < self.val_fraction < 1) or not (0 < self.test_fraction < 1):
            raise SplitError("split fractions must lie in (0, 1)")
        if self.kind == "groupab" and not self.group_b_subjects:
            raise SplitError("groupab plan needs group_b_subjects")


@dataclass
class Split:
    name: str
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    attacker: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def _stratified_take(idx, labels, fraction, rng):
    """Split ``idx`` into (taken, rest), taking ``round(fraction * n_c)`` from each class."""
    taken, rest = [], []
    for c in np.unique(labels[idx]):
        members = idx[labels[idx] == c]
        members = members[rng.permutation(len(members))]
        k = int(round(fraction * len(members)))
        taken.append(members[:k])
        rest.append(members[k:])
    taken = np.sort(np.concatenate(taken)) if taken else np.zeros(0, np.int64)
    rest = np.sort(np.concatenate(rest)) if rest else np.zeros(0, np.int64)
    return taken, rest


def _three_way(idx, labels, plan, rng):
    test, rest = _stratified_take(idx, labels, plan.test_fraction, rng)
    val, train = _stratified_take(rest, labels, plan.val_fraction, rng)
    return train, val, test


def make_splits(epochs: EpochSet, plan: SplitPlan, seed: int = 0) -> list[Split]:
    """Index sets for each fold. Shuffling is seeded and stratified by label."""
    rng = np.random.default_rng(seed)
    labels, subjects = epochs.labels, epochs.subjects
    all_idx = np.arange(epochs.n_epochs)
    subject_ids = np.unique(subjects)
    out = []
    if plan.kind == "within":
        for s in subject_ids:
            tr, va, te = _three_way(all_idx[subjects == s], labels, plan, rng)
            out.append(Split(f"subject{s}", tr, va, te))
    elif plan.kind == "loso":
        if len(subject_ids) < 2:
            raise SplitError("leave-one-subject-out needs at least two subjects")
        for s in subject_ids:
            te = all_idx[subjects == s]
            va, tr = _stratified_take(all_idx[subjects != s], labels, plan.val_fraction, rng)
            out.append(Split(f"loso{s}", tr, va, te))
    elif plan.kind == "mixed":
        tr, va, te = _three_way(all_idx, labels, plan, rng)
        out.append(Split("mixed", tr, va, te))
    else:
        in_b = np.isin(subjects, plan.group_b_subjects)
        if in_b.all() or not in_b.any():
            raise SplitError("group B must be a proper, non-empty subset of subjects")
        tr, va, te = _three_way(all_idx[~in_b], labels, plan, rng)
        out.append(Split("groupab", tr, va, te, attacker=all_idx[in_b]))
    for sp in out:
        if min(len(sp.train), len(sp.val), len(sp.test)) == 0:
            raise SplitError(f"split {sp.name} has an empty partition; not enough epochs")
    return out


# --------------------------------------------------------------------------
# Optimizer and early stopping
# --------------------------------------------------------------------------


class Adam:
    """Adam with bias correction over a graph's parameter store."""

    def __init__(self, graph: dc.Graph, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.graph = graph
        self.lr, self.eps = lr, eps
        self.b1, self.b2 = betas
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in graph.named_params()}
        self.v = {k: np.zeros_like(v) for k, v in graph.named_params()}

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, p in self.graph.named_params():
            g = grads[name]
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class EarlyStopping:
    """Tracks the best validation loss; ``step`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def step(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def evaluate_loss(model: Model, epochs: EpochSet, weights=None, batch_size: int = 256) -> float:
    g = model.graph
    g.eval()
    total, denom = 0.0, 0.0
    w = np.ones(model.n_classes) if weights is None else np.asarray(weights)
    for s in range(0, epochs.n_epochs, batch_size):
        out, _ = g.forward(epochs.data[s:s + batch_size], record=False)
        y = epochs.labels[s:s + batch_size]
        j, _ = dc.cross_entropy(out.astype(np.float64), y, w, reduction="sum")
        total += j
        denom += float(w[y].sum())
    return total / denom


@dataclass
class History:
    rows: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    COLUMNS = ("epoch", "train_loss", "val_loss", "val_rca", "val_bca")

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[c])) for c in self.COLUMNS[1:]])

    def column(self, name) -> list:
        return [r[name] for r in self.rows]


def _check_labels(model: Model, sets: Iterable[EpochSet]):
    for s in sets:
        if s.n_epochs == 0:
            raise ValueError("empty training or validation set")
        if s.labels.min() < 0 or s.labels.max() >= model.n_classes:
            raise ValueError(f"labels must lie in [0, {model.n_classes})")


def train_model(model: Model, train: EpochSet, val: EpochSet, cfg: TrainConfig | None = None):
    """Train in place with Adam and early stopping on the (weighted) validation loss.

    Returns ``(model, history)``; parameters and BatchNorm statistics are
    restored from the epoch with the lowest validation loss.
    """
    cfg = cfg or TrainConfig()
    _check_labels(model, (train, val))
    g = model.graph
    weights = class_weights(train.labels, model.n_classes) if cfg.class_weighting else None
    opt = Adam(g, cfg.learning_rate, cfg.betas, cfg.adam_eps)
    stopper = EarlyStopping(cfg.patience)
    rng = np.random.default_rng([cfg.seed, 7])
    g.reseed(cfg.seed)
    hist = History()
    best_state = g.state()
    x_all, y_all = train.data, train.labels
    for epoch in range(1, cfg.max_epochs + 1):
        g.train()
        order = rng.permutation(train.n_epochs)
        total, count = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            try:
                out, tape = g.forward(x_all[b])
                j, dout = dc.cross_entropy(out, y_all[b], weights)
                grads = g.backward(dout, tape)
            except dc.NonFiniteError as exc:
                raise TrainingDivergence(epoch, str(exc)) from exc
            if not np.isfinite(j):
                raise TrainingDivergence(epoch)
            opt.step(grads.params)
            total += j * len(b)
            count += len(b)
        g.eval()
        try:
            val_loss = evaluate_loss(model, val, weights)
        except dc.NonFiniteError as exc:
            raise TrainingDivergence(epoch, str(exc)) from exc
        if not np.isfinite(val_loss):
            raise TrainingDivergence(epoch, "validation loss is non-finite")
        pred, _ = predict(model, val)
        hist.rows.append(dict(epoch=epoch, train_loss=total / count, val_loss=val_loss,
                              val_rca=rca(pred, val.labels),
                              val_bca=bca(pred, val.labels, model.n_classes)))
        log.debug("epoch %d train %.4f val %.4f rca %.3f", epoch, total / count, val_loss,
                  hist.rows[-1]["val_rca"])
        improved = val_loss < stopper.best
        stop = stopper.step(epoch, val_loss)
        if improved:
            best_state = g.state()
        if stop:
            break
    g.load_state(best_state)
    g.eval()
    hist.best_epoch = stopper.best_epoch
    hist.stopped_epoch = hist.rows[-1]["epoch"]
    return model, hist
