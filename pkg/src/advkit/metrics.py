"""Accuracy metrics, SNR, and time-frequency characterization of perturbations."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .epochs import EpochSet
from .signal import morlet_map

INF_SNR = float("inf")


class MetricError(ValueError):
    pass


def _check(pred, labels):
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(pred) != len(labels):
        raise MetricError(f"{len(pred)} predictions for {len(labels)} labels")
    if len(labels) == 0:
        raise MetricError("cannot score an empty set")
    return pred, labels


def rca(pred, labels) -> float:
    """Raw classification accuracy: correct / total."""
    pred, labels = _check(pred, labels)
    return float(np.count_nonzero(pred == labels)) / len(labels)


def per_class_rca(pred, labels, n_classes: int | None = None) -> np.ndarray:
    pred, labels = _check(pred, labels)
    k = int(n_classes) if n_classes is not None else int(labels.max()) + 1
    classes = np.arange(k) if n_classes is not None else np.unique(labels)
    out = np.full(k, np.nan)
    for c in classes:
        sel = labels == c
        if not sel.any():
            raise MetricError(f"class {c} has no examples; balanced accuracy undefined")
        out[c] = np.count_nonzero(pred[sel] == c) / sel.sum()
    return out


def bca(pred, labels, n_classes: int | None = None) -> float:
    """Balanced accuracy: unweighted mean of the per-class accuracies.

    Without ``n_classes`` the classes present in ``labels`` are used.
    """
    return float(np.nanmean(per_class_rca(pred, labels, n_classes)))


def confusion_matrix(pred, labels, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    pred, labels = _check(pred, labels)
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (labels, pred), 1)
    return m


@dataclass
class MetricReport:
    rca: float
    bca: float
    per_class_rca: list
    confusion: list
    snr_db: float | None = None

    def to_json(self) -> str:
        d = dict(self.__dict__)
        if d["snr_db"] is not None and np.isinf(d["snr_db"]):
            d["snr_db"] = "inf"
        return json.dumps(d, sort_keys=True)


def metric_report(pred, labels, n_classes: int, snr: float | None = None) -> MetricReport:
    return MetricReport(rca(pred, labels), bca(pred, labels, n_classes),
                        per_class_rca(pred, labels, n_classes).tolist(),
                        confusion_matrix(pred, labels, n_classes).tolist(), snr)


def snr_db(clean: EpochSet | np.ndarray, perturbed: EpochSet | np.ndarray) -> float:
    """``10 log10(sum clean^2 / sum (perturbed - clean)^2)`` over the whole set.

    Returns ``inf`` when the perturbation is identically zero.
    """
    a = clean.data if isinstance(clean, EpochSet) else np.asarray(clean)
    b = perturbed.data if isinstance(perturbed, EpochSet) else np.asarray(perturbed)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    a = a.astype(np.float64)
    noise = np.sum((b.astype(np.float64) - a) ** 2)
    if noise == 0:
        return INF_SNR
    return float(10 * np.log10(np.sum(a * a) / noise))


# --------------------------------------------------------------------------
# Perturbation time-frequency report
# --------------------------------------------------------------------------


@dataclass
class TfrReport:
    channel: int
    freqs_hz: np.ndarray
    times_s: np.ndarray
    group1_mean: np.ndarray | None
    group2_mean: np.ndarray | None
    perturbation_mean: np.ndarray
    difference: np.ndarray | None
    group_sizes: tuple = (0, 0)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return json.dumps({
            "channel": self.channel, "freqs_hz": arr(self.freqs_hz), "times_s": arr(self.times_s),
            "group_sizes": list(self.group_sizes), "group1_mean": arr(self.group1_mean),
            "group2_mean": arr(self.group2_mean), "perturbation_mean": arr(self.perturbation_mean),
            "difference": arr(self.difference), "meta": self.meta,
        })

    def write_csv_grids(self, directory) -> list[Path]:
        """One CSV per map: frequency rows, time columns."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for name in ("group1_mean", "group2_mean", "perturbation_mean", "difference"):
            grid = getattr(self, name)
            if grid is None:
                continue
            path = directory / f"{name}.csv"
            with open(path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["freq_hz"] + [f"{t:.6g}" for t in self.times_s])
                for fr, row in zip(self.freqs_hz, grid):
                    w.writerow([f"{fr:.6g}"] + [repr(float(v)) for v in row])
            written.append(path)
        return written


def perturbation_tfr_report(model, clean: EpochSet, adversarial: EpochSet, channel: int = 0,
                            freqs_hz=None, cycles: float = 7.0) -> TfrReport:
    """Group successful attacks on a binary task and average their Morlet maps.

    Group 1: class-0 epochs whose adversarial copy is predicted as class 1.
    Group 2: class-1 epochs now predicted as class 0. The perturbation map is
    averaged over both groups; ``difference`` is group 2 minus group 1.
    """
    from .models import predict

    if clean.data.shape != adversarial.data.shape:
        raise MetricError("clean and adversarial sets differ in shape")
    pred, _ = predict(model, adversarial)
    g1 = np.flatnonzero((clean.labels == 0) & (pred == 1))
    g2 = np.flatnonzero((clean.labels == 1) & (pred == 0))
    if len(g1) + len(g2) == 0:
        raise MetricError("no misclassified adversarial examples: both groups are empty")
    if freqs_hz is None:
        freqs_hz = np.arange(2.0, min(40.0, clean.fs / 2 - 1) + 1)
    return _tfr_groups(clean, adversarial, g1, g2, channel, freqs_hz, cycles)


def _tfr_groups(clean, adversarial, g1, g2, channel, freqs_hz, cycles):
    def channel_set(data, idx):
        n = len(idx)
        return EpochSet(data[idx][:, channel:channel + 1], np.full(n, -1), np.zeros(n), clean.fs)

    def mean_map(data, idx):
        if len(idx) == 0:
            return None, None
        tf = morlet_map(channel_set(data, idx), freqs_hz, cycles)
        return tf.values[:, 0].mean(axis=0), tf

    m1, tf = mean_map(clean.data, g1)
    m2, tf2 = mean_map(clean.data, g2)
    tf = tf if tf is not None else tf2
    both = np.concatenate([g1, g2])
    delta = adversarial.data.astype(np.float64) - clean.data.astype(np.float64)
    pm, _ = mean_map(delta, both)
    diff = None if (m1 is None or m2 is None) else m2 - m1
    return TfrReport(channel, tf.freqs_hz, tf.times_s, m1, m2, pm, diff, (len(g1), len(g2)))
