"""
Preprocessing and time-frequency transforms for epoch sets.

All functions are pure: they return new :class:`EpochSet` objects (or
:class:`TimeFreqMap` results) and never modify their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.signal

from .diffcore import ChannelMix, STFTMagnitude
from .epochs import EpochSet

FILTER_ORDER = 4
CSP_RIDGE = 1e-6
EMA_GUARD = 1e-5


class SignalError(ValueError):
    pass


# --------------------------------------------------------------------------
# Filtering and resampling
# --------------------------------------------------------------------------


def design_bandpass(lo_hz: float, hi_hz: float, fs: float, order: int = FILTER_ORDER):
    """Butterworth band-pass as second-order sections."""
    if not 0 < lo_hz < hi_hz < fs / 2:
        raise SignalError(f"band [{lo_hz}, {hi_hz}] Hz must satisfy 0 < lo < hi < fs/2 = {fs / 2}")
    return scipy.signal.butter(order, [lo_hz, hi_hz], btype="bandpass", fs=fs, output="sos")


def _filtfilt(sos, data, order):
    padlen = min(3 * (2 * order + 1), data.shape[-1] - 1)
    return scipy.signal.sosfiltfilt(sos, data, axis=-1, padtype="odd", padlen=padlen)


def bandpass(epochs: EpochSet, lo_hz: float, hi_hz: float) -> EpochSet:
    """Zero-phase 4th-order Butterworth band-pass, applied per channel per epoch."""
    sos = design_bandpass(lo_hz, hi_hz, epochs.fs)
    out = _filtfilt(sos, epochs.data.astype(np.float64), FILTER_ORDER)
    return epochs.with_data(out.astype(epochs.data.dtype))


def downsample(epochs: EpochSet, factor: int) -> EpochSet:
    """Low-pass at 0.8 x the new Nyquist (zero phase), then keep every ``factor``-th sample."""
    if int(factor) != factor or factor < 1:
        raise SignalError(f"downsample factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if factor == 1:
        return epochs.with_data(epochs.data.copy())
    new_fs = epochs.fs / factor
    sos = scipy.signal.butter(FILTER_ORDER, 0.8 * new_fs / 2, btype="lowpass", fs=epochs.fs,
                              output="sos")
    smooth = _filtfilt(sos, epochs.data.astype(np.float64), FILTER_ORDER)
    t_new = epochs.n_samples // factor
    out = smooth[:, :, ::factor][:, :, :t_new]
    return epochs.with_data(np.ascontiguousarray(out, dtype=epochs.data.dtype), fs=new_fs)


# --------------------------------------------------------------------------
# Normalization
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class P300Scale:
    """``(x - channel mean) / 10``, clipped to ``[-5, 5]``."""

    divisor: float = 10.0
    clip: float = 5.0


@dataclass(frozen=True)
class ZScore:
    """Per-channel, per-epoch ``(x - mean) / std`` (population std)."""


@dataclass(frozen=True)
class EmaStandardize:
    """Causal exponential-moving-average standardization."""

    decay: float = 0.999


def normalize(epochs: EpochSet, scheme) -> EpochSet:
    x = epochs.data.astype(np.float64)
    if x.shape[0] == 0:
        raise SignalError("cannot normalize an empty epoch set")
    if isinstance(scheme, P300Scale):
        out = np.clip((x - x.mean(axis=2, keepdims=True)) / scheme.divisor, -scheme.clip, scheme.clip)
    elif isinstance(scheme, ZScore):
        std = x.std(axis=2, keepdims=True)
        bad = np.argwhere(std[..., 0] == 0)
        if len(bad):
            e, c = bad[0]
            raise SignalError(
                f"zero variance in channel {epochs.channel_names[c]!r} (epoch {e}); cannot z-score")
        out = (x - x.mean(axis=2, keepdims=True)) / std
    elif isinstance(scheme, EmaStandardize):
        out = _ema_standardize(x, scheme.decay)
    else:
        raise SignalError(f"unknown normalization scheme {scheme!r}")
    return epochs.with_data(out.astype(epochs.data.dtype))


def _ema_standardize(x, d):
    out = np.empty_like(x)
    m = x[:, :, 0].copy()
    v = np.ones_like(m)
    out[:, :, 0] = 0.0  # x_0 - m_0 = 0
    for t in range(1, x.shape[2]):
        xt = x[:, :, t]
        m = d * m + (1 - d) * xt
        v = d * v + (1 - d) * (xt - m) ** 2
        out[:, :, t] = (xt - m) / np.sqrt(v + EMA_GUARD)
    return out


# --------------------------------------------------------------------------
# Synchronized averaging
# --------------------------------------------------------------------------


def average_epochs(epochs: EpochSet, group_size: int, grouping_key) -> EpochSet:
    """Average each group of ``group_size`` epochs sharing a key.

    Groups are emitted in order of first appearance. Every group must contain
    exactly ``group_size`` epochs with one common label.
    """
    key = np.asarray(grouping_key)
    if len(key) != epochs.n_epochs:
        raise SignalError("grouping_key must have one entry per epoch")
    _, first, inverse = np.unique(key, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    data, labels, subjects = [], [], []
    for g in order:
        idx = np.flatnonzero(inverse == g)
        if len(idx) != group_size:
            raise SignalError(f"group {key[idx[0]]!r} has {len(idx)} epochs, expected {group_size}")
        lab = np.unique(epochs.labels[idx])
        if len(lab) != 1:
            raise SignalError(f"group {key[idx[0]]!r} mixes labels {lab.tolist()}")
        data.append(epochs.data[idx].mean(axis=0))
        labels.append(lab[0])
        subjects.append(epochs.subjects[idx[0]])
    return EpochSet(np.stack(data).astype(epochs.data.dtype), labels, subjects, epochs.fs,
                    list(epochs.class_names), list(epochs.channel_names), dict(epochs.provenance))


# --------------------------------------------------------------------------
# Common spatial patterns
# --------------------------------------------------------------------------


@dataclass
class CspProjection:
    W: np.ndarray
    source_class: list
    classes: list
    eigenvalues: np.ndarray
    ridge: float = CSP_RIDGE
    meta: dict = field(default_factory=dict)

    def as_layer(self) -> ChannelMix:
        return ChannelMix(self.W)


def _class_covariance(data):
    covs = np.einsum("nct,ndt->ncd", data, data)
    traces = np.trace(covs, axis1=1, axis2=2)
    traces = np.where(traces > 0, traces, 1.0)
    return (covs / traces[:, None, None]).mean(axis=0)


def csp_fit(epochs: EpochSet, filters_per_class: int, ridge: float = CSP_RIDGE,
            tie_tol: float = 1e-9) -> CspProjection:
    """One-vs-rest CSP. Rows of ``W`` are grouped by class, best filter first."""
    labels = epochs.labels
    classes = sorted(int(c) for c in np.unique(labels[labels >= 0]))
    if len(classes) < 2:
        raise SignalError("CSP needs at least two classes")
    c_in = epochs.n_channels
    if filters_per_class * len(classes) > c_in:
        raise SignalError(f"{filters_per_class} filters x {len(classes)} classes exceeds {c_in} channels")
    x = epochs.data.astype(np.float64)
    x = x - x.mean(axis=2, keepdims=True)
    covs = {}
    for c in classes:
        sel = labels == c
        if sel.sum() < 2:
            raise SignalError(f"class {c} has fewer than two epochs")
        covs[c] = _class_covariance(x[sel])
    rows, sources, eigs = [], [], []
    for c in classes:
        rest = np.mean([covs[o] for o in classes if o != c], axis=0)
        tr = np.trace(rest)
        if not tr > 0:
            raise SignalError("singular covariance: rest-class data has zero power")
        rest = rest + ridge * tr / c_in * np.eye(c_in)
        try:
            vals, vecs = scipy.linalg.eigh(covs[c], rest)
        except np.linalg.LinAlgError as exc:
            raise SignalError(f"singular covariance for class {c} even after ridge") from exc
        vecs = vecs.T
        peak = np.argmax(np.abs(vecs), axis=1)
        scale = max(np.abs(vals).max(), 1e-300)
        # descending eigenvalue; near-equal eigenvalues ordered by dominant channel index
        order = sorted(range(len(vals)), key=lambda i: (-np.round(vals[i] / (scale * tie_tol)), peak[i]))
        for i in order[:filters_per_class]:
            w = vecs[i]
            if w[np.argmax(np.abs(w))] < 0:
                w = -w
            rows.append(w)
            sources.append(c)
            eigs.append(vals[i])
    return CspProjection(np.array(rows), sources, classes, np.array(eigs), ridge)


def csp_apply(proj: CspProjection, epochs: EpochSet) -> EpochSet:
    if proj.W.shape[1] != epochs.n_channels:
        raise SignalError(f"CSP expects {proj.W.shape[1]} channels, epochs have {epochs.n_channels}")
    out = np.einsum("oc,nct->not", proj.W, epochs.data)
    names = [f"csp{i}" for i in range(proj.W.shape[0])]
    return epochs.with_data(out.astype(epochs.data.dtype), channel_names=names)


# --------------------------------------------------------------------------
# Time-frequency maps
# --------------------------------------------------------------------------


@dataclass
class TimeFreqMap:
    """Nonnegative magnitudes ``values[..., C, F, M]``.

    When computed for a whole epoch set the leading axis indexes epochs;
    ``tfm[i]`` returns the single-epoch map.
    """

    values: np.ndarray
    freqs_hz: np.ndarray
    times_s: np.ndarray

    def __getitem__(self, i) -> "TimeFreqMap":
        return TimeFreqMap(self.values[i], self.freqs_hz, self.times_s)

    def __len__(self):
        return self.values.shape[0]

    def mean(self) -> "TimeFreqMap":
        return TimeFreqMap(self.values.mean(axis=0), self.freqs_hz, self.times_s)


def stft(epochs: EpochSet, window_len: int, hop: int, window: str = "hann") -> TimeFreqMap:
    """Magnitude STFT via the differentiable :class:`STFTMagnitude` map."""
    if window != "hann":
        raise SignalError("only the Hann window is supported")
    if window_len > epochs.n_samples:
        raise SignalError(f"window {window_len} longer than epoch length {epochs.n_samples}")
    if hop < 1:
        raise SignalError("hop must be >= 1")
    layer = STFTMagnitude(window_len, hop)
    layer.build((epochs.n_channels, epochs.n_samples), np.random.default_rng(0))
    values, _ = layer.forward(epochs.data.astype(np.float64), False, None)
    m = values.shape[-1]
    freqs = np.arange(window_len // 2 + 1) * epochs.fs / window_len
    times = (np.arange(m) * hop + window_len / 2) / epochs.fs
    return TimeFreqMap(values, freqs, times)


def morlet_wavelet(freq_hz: float, fs: float, cycles: float = 7.0) -> np.ndarray:
    """Complex Morlet kernel with unit energy.

    Unit energy keeps the response to white noise independent of frequency.
    """
    sigma_t = cycles / (2 * np.pi * freq_hz)
    half = int(np.ceil(4 * sigma_t * fs))
    t = np.arange(-half, half + 1) / fs
    w = np.exp(-t ** 2 / (2 * sigma_t ** 2)) * np.exp(2j * np.pi * freq_hz * t)
    return w / np.linalg.norm(w)


def morlet_map(epochs: EpochSet, freqs_hz, cycles: float = 7.0) -> TimeFreqMap:
    """Magnitude of complex Morlet convolution; output ``[N, C, F, T]``."""
    freqs = np.asarray(list(freqs_hz), dtype=float)
    if freqs.size == 0:
        raise SignalError("morlet_map needs at least one frequency")
    if np.any(freqs <= 0) or np.any(freqs >= epochs.fs / 2):
        raise SignalError(f"frequencies must lie in (0, {epochs.fs / 2}) Hz")
    x = epochs.data.astype(np.float64)
    out = np.empty(x.shape[:2] + (len(freqs), x.shape[2]))
    for i, f in enumerate(freqs):
        w = morlet_wavelet(f, epochs.fs, cycles)
        conv = scipy.signal.fftconvolve(x, w[None, None, :], mode="same", axes=2)
        out[:, :, i, :] = np.abs(conv)
    times = np.arange(x.shape[2]) / epochs.fs
    order = np.argsort(freqs)
    return TimeFreqMap(out[:, :, order], freqs[order], times)
