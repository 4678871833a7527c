"""
Synthetic EEG-like epochs with class-specific evoked templates in 1/f noise.

Each class owns a smooth template: a Gaussian-windowed sinusoid burst whose
frequency, latency and channel subset depend on the class. Subjects scale
and shift the templates slightly. Background noise has a 1/f power
spectrum. Every epoch is z-scored per channel at the end.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..epochs import EpochSet


@dataclass
class SynthSpec:
    n_classes: int = 2
    n_epochs: int = 2000
    n_channels: int = 8
    n_samples: int = 128
    fs: float = 128.0
    snr_db: float = 0.0
    n_subjects: int = 4
    seed: int = 0
    group_size: int = 1
    latency_jitter_s: float = 0.02

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("synthetic data needs at least two classes")
        if min(self.n_epochs, self.n_channels, self.n_samples, self.n_subjects, self.group_size) < 1:
            raise ValueError("n_epochs, n_channels, n_samples, n_subjects and group_size must be >= 1")
        if self.fs <= 0:
            raise ValueError("fs must be positive")
        if self.n_epochs % (self.n_classes * self.group_size):
            raise ValueError("n_epochs must be divisible by n_classes * group_size for balanced labels")

    def to_dict(self) -> dict:
        return asdict(self)


def class_template(k: int, spec: SynthSpec, latency_shift: float = 0.0,
                   gain: float = 1.0) -> np.ndarray:
    """Noise-free ``C x T`` template of class ``k``."""
    c, t, fs = spec.n_channels, spec.n_samples, spec.fs
    dur = t / fs
    nyq = fs / 2
    freq = min(3.0 + 2.5 * k, 0.4 * nyq)
    latency = dur * (0.3 + 0.4 * k / max(spec.n_classes - 1, 1)) + latency_shift
    width = 0.25 * dur
    times = np.arange(t) / fs
    burst = np.exp(-0.5 * ((times - latency) / width) ** 2) * np.cos(2 * np.pi * freq * (times - latency))
    # smooth spatial profile centred on a class-dependent channel
    centre = (k * c / spec.n_classes + c / (2 * spec.n_classes)) % c
    ch = np.arange(c)
    dist = np.minimum(np.abs(ch - centre), c - np.abs(ch - centre))
    spatial = np.exp(-0.5 * (dist / max(c / spec.n_classes, 1.5)) ** 2)
    return gain * spatial[:, None] * burst[None, :]


def pink_noise(rng: np.random.Generator, shape, fs: float) -> np.ndarray:
    """Unit-variance noise with a 1/f power spectrum along the last axis."""
    t = shape[-1]
    white = rng.standard_normal(shape)
    spec = np.fft.rfft(white, axis=-1)
    f = np.fft.rfftfreq(t, 1 / fs)
    f[0] = f[1] if t > 1 else 1.0
    spec *= 1 / np.sqrt(f)
    out = np.fft.irfft(spec, n=t, axis=-1)
    out -= out.mean(axis=-1, keepdims=True)
    std = out.std(axis=-1, keepdims=True)
    return out / np.where(std > 0, std, 1)


def synth_dataset(spec: SynthSpec) -> tuple[EpochSet, np.ndarray]:
    """Generate a balanced synthetic set; returns ``(epochs, group_keys)``.

    ``group_keys`` assigns consecutive runs of ``group_size`` same-label epochs
    (one "stimulus" each) for synchronized-averaging protocols.
    """
    rng = np.random.default_rng(spec.seed)
    n, c, t = spec.n_epochs, spec.n_channels, spec.n_samples
    n_groups = n // spec.group_size
    group_labels = np.tile(np.arange(spec.n_classes), n_groups // spec.n_classes)
    group_labels = group_labels[rng.permutation(n_groups)]
    labels = np.repeat(group_labels, spec.group_size)
    keys = np.repeat(np.arange(n_groups), spec.group_size)
    subjects = np.repeat(np.arange(n_groups) % spec.n_subjects, spec.group_size)

    subj_gain = 1 + 0.2 * rng.uniform(-1, 1, spec.n_subjects)
    subj_shift = 0.03 * (t / spec.fs) * rng.uniform(-1, 1, spec.n_subjects)

    # template power is the mean square over the whole epoch; noise has unit power
    ref = np.mean([np.mean(class_template(k, spec) ** 2) for k in range(spec.n_classes)])
    amp = np.sqrt(10 ** (spec.snr_db / 10) / ref)

    data = pink_noise(rng, (n, c, t), spec.fs)
    jitter = spec.latency_jitter_s * rng.standard_normal(n)
    for i in range(n):
        s = subjects[i]
        data[i] += amp * class_template(labels[i], spec, subj_shift[s] + jitter[i], subj_gain[s])
    data -= data.mean(axis=2, keepdims=True)
    data /= data.std(axis=2, keepdims=True)
    epochs = EpochSet(data.astype(np.float32), labels, subjects, spec.fs,
                      [f"class{k}" for k in range(spec.n_classes)],
                      [f"ch{i}" for i in range(c)],
                      {"source": "synthetic", "spec": spec.to_dict()})
    return epochs, keys
