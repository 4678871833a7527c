"""
Sign-gradient adversarial attacks on epoch classifiers.

All attacks add ``eps * sign(grad_x J)`` (or random signs) to the clean
epochs, so every coordinate moves by exactly 0 or ``eps``. The exact
perturbation is kept on the result next to the adversarial epochs.
No clipping is applied after the perturbation.

Threat models:

* white box: gradients of the target itself, with the target's own
  predictions standing in for the unknown true labels (UFGSM);
* gray box: a substitute trained on the target's training data;
* black box: a substitute trained on oracle-labelled queries, grown by
  sign-gradient augmentation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .epochs import EpochSet
from .metrics import bca, rca, snr_db
from .models import ArchSpec, Model, build_model, loss_and_input_gradient, predict
from .signal import SignalError, average_epochs
from .train import TrainConfig, train_model

log = logging.getLogger(__name__)

ATTACK_KINDS = ("fgsm", "whitebox", "graybox", "blackbox", "noise")


class AttackError(ValueError):
    pass


class QueryBudgetExceeded(RuntimeError):
    pass


@dataclass
class AttackSpec:
    kind: str = "whitebox"
    epsilon: float = 0.1
    substitute: str | None = None
    lam: float = 0.5
    n_iter: int = 2
    seed: int = 0
    query_budget: int | None = None

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ATTACK_KINDS:
            raise AttackError(f"unknown attack kind {self.kind!r}; choose from {ATTACK_KINDS}")
        _check_eps(self.epsilon)
        if self.lam <= 0:
            raise AttackError("lambda must be positive")
        if self.n_iter < 0:
            raise AttackError("iteration count must be >= 0")
        if self.kind in ("graybox", "blackbox") and not self.substitute:
            raise AttackError(f"{self.kind} attack needs a substitute architecture")


@dataclass
class AttackResult:
    """Adversarial epochs plus clean/attacked accuracies and SNR.

    ``perturbation`` holds the exact added signal; ``adversarial.data`` equals
    ``clean + perturbation`` rounded to the data dtype.
    """

    adversarial: EpochSet
    perturbation: np.ndarray
    max_deviation: np.ndarray
    clean_rca: float | None
    clean_bca: float | None
    adv_rca: float | None
    adv_bca: float | None
    snr_db: float
    meta: dict = field(default_factory=dict)


@dataclass
class LabeledSet:
    """Epoch arrays with oracle-assigned labels (the growing substitute training set)."""

    data: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.data) != len(self.labels):
            raise AttackError(f"{len(self.data)} epochs but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def union(self, other: "LabeledSet") -> "LabeledSet":
        return LabeledSet(np.concatenate([self.data, other.data]),
                          np.concatenate([self.labels, other.labels]))


def _check_eps(eps):
    if not eps >= 0:
        raise AttackError(f"epsilon must be >= 0, got {eps}")


def _scores(pred, labels):
    if labels.min(initial=0) < 0:
        return None, None
    return rca(pred, labels), bca(pred, labels)


def _finish(evaluator: Model | None, clean: EpochSet, eta: np.ndarray, meta: dict) -> AttackResult:
    adv_data = (clean.data.astype(np.float64) + eta).astype(clean.data.dtype)
    adversarial = clean.with_data(adv_data)
    adversarial.provenance.update({k: v for k, v in meta.items() if k in ("attack", "epsilon", "seed")})
    dev = np.abs(adv_data.astype(np.float64) - clean.data.astype(np.float64))
    max_dev = dev.reshape(len(clean), -1).max(axis=1) if len(clean) else np.zeros(0)
    c_rca = c_bca = a_rca = a_bca = None
    if evaluator is not None and len(clean):
        c_rca, c_bca = _scores(predict(evaluator, clean)[0], clean.labels)
        a_rca, a_bca = _scores(predict(evaluator, adversarial)[0], clean.labels)
    return AttackResult(adversarial, eta, max_dev, c_rca, c_bca, a_rca, a_bca,
                        snr_db(clean, adversarial), meta)


def sign_step(model: Model, x: np.ndarray, y, step: float) -> np.ndarray:
    """``step * sign(grad_x J(theta, x, y))`` with sign(0) = 0, one gradient per epoch."""
    _, grad = loss_and_input_gradient(model, x, y, reduction="sum")
    return step * np.sign(grad).astype(np.float64)


# --------------------------------------------------------------------------
# White box
# --------------------------------------------------------------------------


def fgsm(model: Model, x: EpochSet, eps: float) -> AttackResult:
    """Supervised FGSM using the true labels of ``x``."""
    _check_eps(eps)
    if len(x) and x.labels.min() < 0:
        raise AttackError("fgsm needs true labels; use ufgsm_whitebox for unlabeled epochs")
    eta = sign_step(model, x.data, x.labels, eps)
    return _finish(model, x, eta, {"attack": "fgsm", "epsilon": eps})


def ufgsm_whitebox(model: Model, x: EpochSet, eps: float, evaluator: Model | None = None,
                   kind: str = "whitebox") -> AttackResult:
    """FGSM with the model's own predictions in place of the true labels.

    ``evaluator`` (default: ``model``) is the classifier the result is scored on.
    """
    _check_eps(eps)
    y_pred, _ = predict(model, x)
    eta = sign_step(model, x.data, y_pred, eps)
    return _finish(evaluator if evaluator is not None else model, x, eta,
                   {"attack": kind, "epsilon": eps})


def transfer_attack(substitute: Model, target: Model, x: EpochSet, eps: float,
                    kind: str = "transfer") -> AttackResult:
    """UFGSM against ``substitute``, scored on ``target``."""
    res = ufgsm_whitebox(substitute, x, eps, evaluator=target, kind=kind)
    if len(x):
        res.meta["substitute_agreement"] = float(np.mean(predict(substitute, x)[0] == predict(target, x)[0]))
    return res


# --------------------------------------------------------------------------
# Gray box
# --------------------------------------------------------------------------


def _fit_substitute(arch: ArchSpec, data: EpochSet, cfg: TrainConfig, seed: int) -> Model:
    present = np.unique(data.labels)
    cfg = replace(cfg, seed=seed)
    if len(present) < arch.n_classes:
        cfg = replace(cfg, class_weighting=False)
    val, train = _val_split(data, 0.25, seed)
    model = build_model(arch, seed, train_data=train if arch.family == "spectrocnn" else None)
    train_model(model, train, val, cfg)
    return model


def _val_split(data: EpochSet, fraction: float, seed: int):
    rng = np.random.default_rng([seed, 11])
    val_idx, train_idx = [], []
    for c in np.unique(data.labels):
        members = np.flatnonzero(data.labels == c)
        members = members[rng.permutation(len(members))]
        k = max(1, int(round(fraction * len(members)))) if len(members) > 1 else 0
        val_idx.append(members[:k])
        train_idx.append(members[k:])
    return data.subset(np.sort(np.concatenate(val_idx))), data.subset(np.sort(np.concatenate(train_idx)))


def substitute_arch(family: str, like: EpochSet, n_classes: int, hyper: dict | None = None) -> ArchSpec:
    return ArchSpec(family, like.n_channels, like.n_samples, n_classes, like.fs, dict(hyper or {}))


def ufgsm_graybox(train_data: EpochSet, arch: ArchSpec, target: Model, x: EpochSet, eps: float,
                  cfg: TrainConfig | None = None, seed: int = 0) -> AttackResult:
    """Train a substitute on the target's training data, then attack through it."""
    _check_eps(eps)
    cfg = cfg or TrainConfig()
    substitute = _fit_substitute(arch, train_data, cfg, seed)
    res = transfer_attack(substitute, target, x, eps, kind="graybox")
    res.meta.update(substitute=arch.family, substitute_seed=seed)
    res.meta["substitute_model"] = substitute
    return res


# --------------------------------------------------------------------------
# Black box
# --------------------------------------------------------------------------


class Oracle:
    """Label-only query access to a model, with a query counter and optional budget."""

    def __init__(self, model: Model, budget: int | None = None):
        self._model = model
        self.budget = budget
        self.queries = 0

    @property
    def n_classes(self) -> int:
        return self._model.n_classes

    def query(self, x: np.ndarray) -> np.ndarray:
        n = len(x)
        if self.budget is not None and self.queries + n > self.budget:
            raise QueryBudgetExceeded(
                f"query budget {self.budget} exceeded ({self.queries} used, {n} requested)")
        self.queries += n
        return predict(self._model, x)[0]

    def evaluation_model(self) -> Model:
        # scoring only; not available to the attacker
        return self._model


def balance_by_downsampling(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices keeping ``min_c n_c`` randomly chosen epochs of every present class."""
    classes, counts = np.unique(labels, return_counts=True)
    m = counts.min()
    keep = [rng.choice(np.flatnonzero(labels == c), m, replace=False) for c in classes]
    return np.sort(np.concatenate(keep))


def ufgsm_blackbox(oracle: Oracle | Model, seed_set: EpochSet, arch: ArchSpec, lam: float,
                   n_iter: int, eps: float, x: EpochSet, cfg: TrainConfig | None = None,
                   seed: int = 0, query_budget: int | None = None) -> AttackResult:
    """Substitute training from oracle labels with sign-gradient augmentation.

    D starts as the oracle-labelled seed set (majority classes randomly
    downsampled). Each of ``n_iter`` rounds adds
    ``{x + lam * sign(grad_x J(theta', x, y)) : (x, y) in D}`` relabelled by
    the oracle, then retrains the substitute on the doubled D. The default
    query budget is ``|S| * 2**n_iter``.
    """
    _check_eps(eps)
    if lam <= 0:
        raise AttackError("lambda must be positive")
    cfg = cfg or TrainConfig()
    if isinstance(oracle, Model):
        budget = query_budget if query_budget is not None else len(seed_set) * 2 ** n_iter
        oracle = Oracle(oracle, budget)
    elif query_budget is not None:
        oracle.budget = query_budget
    rng = np.random.default_rng([seed, 5])

    y0 = oracle.query(seed_set.data)
    keep = balance_by_downsampling(y0, rng)
    d = LabeledSet(seed_set.data[keep], y0[keep])
    sizes = [len(d)]

    def as_set(data, labels):
        return EpochSet(data, labels, np.zeros(len(labels)), seed_set.fs,
                        [f"class{k}" for k in range(arch.n_classes)], list(seed_set.channel_names))

    substitute = _fit_substitute(arch, as_set(d.data, d.labels), cfg, seed)
    for n in range(1, n_iter + 1):
        step = sign_step(substitute, d.data, d.labels, lam)
        new_x = (d.data.astype(np.float64) + step).astype(d.data.dtype)
        d = d.union(LabeledSet(new_x, oracle.query(new_x)))
        sizes.append(len(d))
        log.debug("black-box round %d: |D| = %d", n, len(d))
        substitute = _fit_substitute(arch, as_set(d.data, d.labels), cfg, seed + n)
    res = transfer_attack(substitute, oracle.evaluation_model(), x, eps, kind="blackbox")
    res.meta.update(substitute=arch.family, substitute_seed=seed, dataset_sizes=sizes,
                    queries=oracle.queries, query_budget=oracle.budget, lam=lam, n_iter=n_iter)
    res.meta["substitute_model"] = substitute
    return res


# --------------------------------------------------------------------------
# Baseline noise
# --------------------------------------------------------------------------


def random_noise(x: EpochSet, eps: float, seed: int = 0, model: Model | None = None) -> AttackResult:
    """``eps * sign(N(0, 1))`` per coordinate; scored on ``model`` when given."""
    _check_eps(eps)
    rng = np.random.default_rng(seed)
    eta = eps * np.sign(rng.standard_normal(x.data.shape))
    return _finish(model, x, eta, {"attack": "noise", "epsilon": eps, "seed": seed})


# --------------------------------------------------------------------------
# Synchronized-average attacks
# --------------------------------------------------------------------------

AVERAGE_MODES = ("PSE", "AAE", "PAE")


def averaged_attack(model: Model, singles: EpochSet, group_keys, mode: str, eps: float,
                    group_size: int = 10) -> AttackResult:
    """White-box attacks around synchronized averaging.

    PSE attacks each single epoch and is scored on single epochs. AAE attacks
    each single epoch and averages the adversarial copies per group. PAE
    averages first and attacks the averaged epoch. AAE and PAE are scored on
    averaged epochs and their perturbation is relative to the clean average.
    """
    mode = mode.upper()
    if mode not in AVERAGE_MODES:
        raise AttackError(f"mode must be one of {AVERAGE_MODES}")
    _check_eps(eps)
    try:
        averaged = average_epochs(singles, group_size, group_keys)
    except SignalError as exc:
        raise AttackError(str(exc)) from exc
    if mode == "PAE":
        res = ufgsm_whitebox(model, averaged, eps, kind="PAE")
        return res
    single_res = ufgsm_whitebox(model, singles, eps, kind="PSE")
    if mode == "PSE":
        return single_res
    adv_avg = average_epochs(single_res.adversarial, group_size, group_keys)
    eta = adv_avg.data.astype(np.float64) - averaged.data.astype(np.float64)
    return _finish(model, averaged, eta, {"attack": "AAE", "epsilon": eps})
