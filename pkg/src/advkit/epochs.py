"""EpochSet: a batch of multichannel EEG epochs with labels and subject ids."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

UNLABELED = -1


@dataclass
class EpochSet:
    """Epochs ``data[N, C, T]`` sampled at ``fs`` Hz.

    ``labels[i]`` is a class index or ``-1`` for unlabeled epochs; ``subjects[i]``
    identifies the recording subject.
    """

    data: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    fs: float
    class_names: list = field(default_factory=list)
    channel_names: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"EpochSet data must be N x C x T, got shape {self.data.shape}")
        n = self.data.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.subjects = np.asarray(self.subjects, dtype=np.int64).reshape(-1)
        if len(self.labels) != n or len(self.subjects) != n:
            raise ValueError(
                f"labels ({len(self.labels)}) and subjects ({len(self.subjects)}) must match N={n}")
        if not self.fs > 0:
            raise ValueError("fs must be positive")
        if not self.class_names and n and self.labels.max() >= 0:
            self.class_names = [str(k) for k in range(int(self.labels.max()) + 1)]
        if not self.channel_names:
            self.channel_names = [f"ch{c}" for c in range(self.data.shape[1])]
        if len(self.channel_names) != self.data.shape[1]:
            raise ValueError("channel_names length must equal C")
        if np.any(self.labels < UNLABELED) or np.any(self.labels >= len(self.class_names)):
            raise ValueError("labels must be -1 or < number of classes")

    @property
    def n_epochs(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def n_samples(self) -> int:
        return self.data.shape[2]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def __len__(self):
        return self.n_epochs

    def subset(self, idx) -> "EpochSet":
        idx = np.asarray(idx)
        return replace(self, data=self.data[idx], labels=self.labels[idx],
                       subjects=self.subjects[idx], provenance=dict(self.provenance))

    def with_data(self, data: np.ndarray, **changes) -> "EpochSet":
        return replace(self, data=data, provenance=dict(self.provenance), **changes)

    def with_labels(self, labels) -> "EpochSet":
        return replace(self, labels=np.asarray(labels), provenance=dict(self.provenance))

    @staticmethod
    def concat(sets: list["EpochSet"]) -> "EpochSet":
        first = sets[0]
        return replace(first,
                       data=np.concatenate([s.data for s in sets]),
                       labels=np.concatenate([s.labels for s in sets]),
                       subjects=np.concatenate([s.subjects for s in sets]),
                       provenance=dict(first.provenance))
