"""
Differentiable EEG classifiers built on :mod:`advkit.diffcore`.

Four families are available: ``eegnet`` (compact depthwise-separable CNN),
``deepcnn`` (four conv blocks), ``shallowcnn`` (square / average-pool / log
band-power network) and ``spectrocnn`` (fixed CSP + STFT front-end feeding a
small 2-D CNN). Every model takes raw ``(N, C, T)`` epochs; for ``spectrocnn``
the front-end is part of the graph so input gradients reach the raw signal.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .epochs import EpochSet
from .signal import CspProjection, csp_fit

FAMILIES = ("eegnet", "deepcnn", "shallowcnn", "spectrocnn")
ALIASES = {
    "eegnetlike": "eegnet", "deepcnnlike": "deepcnn", "shallowcnnlike": "shallowcnn",
    "spectro": "spectrocnn", "spectrocnnlike": "spectrocnn",
}


class ArchError(ValueError):
    pass


@dataclass
class ArchSpec:
    family: str
    n_channels: int
    n_samples: int
    n_classes: int
    fs: float = 128.0
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        fam = self.family.lower()
        self.family = ALIASES.get(fam, fam)
        if self.family not in FAMILIES:
            raise ArchError(f"unknown architecture family {self.family!r}; choose from {FAMILIES}")
        for name in ("n_channels", "n_samples", "n_classes"):
            if int(getattr(self, name)) < 1:
                raise ArchError(f"{name} must be >= 1")
        if self.n_classes < 2:
            raise ArchError("need at least two classes")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**d)


@dataclass
class Model:
    arch: ArchSpec
    graph: dc.Graph
    csp: CspProjection | None = None

    @property
    def n_classes(self) -> int:
        return self.arch.n_classes

    def n_params(self) -> int:
        return self.graph.n_params()


def _fit(k: int, extent: int) -> int:
    """Halve ``k`` until it fits in ``extent``."""
    k = max(int(k), 1)
    while k > extent and k > 1:
        k //= 2
    if k > extent:
        raise ArchError(f"kernel cannot fit extent {extent}")
    return k


def _odd(k: int) -> int:
    return k if k % 2 else max(k - 1, 1)


def _pool_if_fits(layers, mode, window, length):
    if length >= window:
        layers.append(dc.Pool(mode, (1, window)))
        return length // window
    return length


def _eegnet(a: ArchSpec) -> list:
    h = a.hyper
    f1, depth, f2 = h.get("F1", 8), h.get("D", 2), h.get("F2", 16)
    drop = h.get("dropout", 0.25)
    c, t = a.n_channels, a.n_samples
    k1 = _odd(_fit(min(int(round(a.fs / 2)), max(t // 2, 1)), t))
    layers = [
        dc.Reshape((1, c, t)),
        dc.Conv2D(f1, (1, k1), padding=(0, k1 // 2), bias=False),
        dc.BatchNorm(),
        dc.Conv2D(f1 * depth, (c, 1), groups=f1, bias=False),
        dc.BatchNorm(),
        dc.Activation("ELU"),
    ]
    length = _pool_if_fits(layers, "Avg", 4, t)
    layers.append(dc.Dropout(drop))
    k2 = _odd(_fit(16, length))
    layers += [
        dc.Conv2D(f1 * depth, (1, k2), padding=(0, k2 // 2), groups=f1 * depth, bias=False),
        dc.Conv2D(f2, (1, 1), bias=False),
        dc.BatchNorm(),
        dc.Activation("ELU"),
    ]
    _pool_if_fits(layers, "Avg", 8, length)
    layers += [dc.Dropout(drop), dc.Flatten(), dc.Dense(a.n_classes)]
    return layers


def _deepcnn(a: ArchSpec) -> list:
    h = a.hyper
    filters = h.get("filters", (25, 50, 100, 200))
    kernel = h.get("kernel", 10)
    pool = h.get("pool", 3)
    c, t = a.n_channels, a.n_samples
    k = _fit(kernel, t)
    layers = [
        dc.Reshape((1, c, t)),
        dc.Conv2D(filters[0], (1, k)),
        dc.Conv2D(filters[0], (c, 1), bias=False),
        dc.BatchNorm(),
        dc.Activation("ELU"),
    ]
    length = _pool_if_fits(layers, "Max", pool, t - k + 1)
    for n_f in filters[1:]:
        k = _fit(kernel, length)
        layers += [dc.Conv2D(n_f, (1, k), bias=False), dc.BatchNorm(), dc.Activation("ELU")]
        length = _pool_if_fits(layers, "Max", pool, length - k + 1)
    layers += [dc.Flatten(), dc.Dense(a.n_classes)]
    return layers


def _shallowcnn(a: ArchSpec) -> list:
    h = a.hyper
    n_f = h.get("filters", 40)
    c, t = a.n_channels, a.n_samples
    k = _fit(h.get("kernel", 25), t)
    length = t - k + 1
    window = _fit(h.get("pool", 75), length)
    stride = min(h.get("pool_stride", 15), window)
    return [
        dc.Reshape((1, c, t)),
        dc.Conv2D(n_f, (1, k)),
        dc.Conv2D(n_f, (c, 1), bias=False),
        dc.BatchNorm(),
        dc.Activation("Square"),
        dc.Pool("Avg", (1, window), (1, stride)),
        dc.Activation("Log"),
        dc.Dropout(h.get("dropout", 0.5)),
        dc.Flatten(),
        dc.Dense(a.n_classes),
    ]


def _spectrocnn(a: ArchSpec, csp: CspProjection) -> list:
    h = a.hyper
    win = _fit(h.get("window", 64), a.n_samples)
    hop = h.get("hop", 16)
    n_bins, n_frames = win // 2 + 1, (a.n_samples - win) // hop + 1
    layers = [csp.as_layer(), dc.STFTMagnitude(win, hop)]
    shape = (n_bins, n_frames)
    for n_f in h.get("filters", (16, 32)):
        kh, kw = _fit(3, shape[0]), _fit(3, shape[1])
        layers += [dc.Conv2D(n_f, (kh, kw), padding=(kh // 2, kw // 2), bias=False),
                   dc.BatchNorm(), dc.Activation("ELU")]
        ph, pw = min(2, shape[0]), min(2, shape[1])
        if ph > 1 or pw > 1:
            layers.append(dc.Pool("Max", (ph, pw)))
            shape = (shape[0] // ph, shape[1] // pw)
    layers += [dc.Flatten(), dc.Dense(a.n_classes)]
    return layers


def fit_frontend(arch: ArchSpec, train: EpochSet) -> CspProjection:
    """Fit the SpectroCNN CSP projection on training epochs."""
    return csp_fit(train, arch.hyper.get("filters_per_class", 2))


def build_model(arch: ArchSpec, seed: int = 0, csp: CspProjection | None = None,
                train_data: EpochSet | None = None, dtype=np.float32) -> Model:
    """Construct a model with parameters drawn deterministically from ``seed``.

    ``spectrocnn`` needs a fitted CSP projection: pass ``csp`` directly or
    ``train_data`` to fit one.
    """
    if arch.family == "spectrocnn":
        if csp is None:
            if train_data is None:
                raise ArchError("spectrocnn needs a CSP projection or training data to fit one")
            csp = fit_frontend(arch, train_data)
        if csp.W.shape[1] != arch.n_channels:
            raise ArchError("CSP projection channel count does not match the architecture")
        layers = _spectrocnn(arch, csp)
    else:
        csp = None
        layers = {"eegnet": _eegnet, "deepcnn": _deepcnn, "shallowcnn": _shallowcnn}[arch.family](arch)
    try:
        graph = dc.Graph((arch.n_channels, arch.n_samples), layers, seed=seed, dtype=dtype)
    except dc.ShapeError as exc:
        raise ArchError(str(exc)) from exc
    return Model(arch, graph, csp)


def _batches(n, size):
    for s in range(0, n, size):
        yield slice(s, min(s + size, n))


def logits(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    g = model.graph
    mode = g.mode
    g.eval()
    try:
        outs = [g.forward(x[sl], record=False)[0] for sl in _batches(len(x), batch_size)]
    finally:
        g.mode = mode
    if not outs:
        return np.zeros((0, model.n_classes), dtype=g.dtype)
    return np.concatenate(outs)


def predict(model: Model, epochs: EpochSet | np.ndarray, batch_size: int = 256):
    """Return ``(labels, probabilities)``; ties resolve to the smallest class index."""
    x = epochs.data if isinstance(epochs, EpochSet) else np.asarray(epochs)
    p = dc.softmax(logits(model, x, batch_size).astype(np.float64))
    return p.argmax(axis=1), p


def loss_and_input_gradient(model: Model, x: np.ndarray, y, class_weights=None,
                            reduction: str = "mean", batch_size: int = 256):
    """Weighted cross entropy and its gradient with respect to the raw input ``x``.

    The graph is evaluated in eval mode. With ``reduction="sum"`` each
    epoch's gradient is independent of the rest of the batch, which the
    attacks rely on.
    """
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (len(x),) or (len(y) and (y.min() < 0 or y.max() >= model.n_classes)):
        raise ValueError(f"labels must be {len(x)} class indices in [0, {model.n_classes})")
    g = model.graph
    mode = g.mode
    g.eval()
    total = 0.0
    grads = []
    if reduction == "mean":
        w = np.ones(model.n_classes) if class_weights is None else np.asarray(class_weights, float)
        denom = float(w[y].sum())
    try:
        for sl in _batches(len(x), batch_size):
            out, tape = g.forward(x[sl])
            j, dout = dc.cross_entropy(out, y[sl], class_weights, reduction="sum")
            if reduction == "mean":
                j, dout = j / denom, dout / g.dtype.type(denom)
            grads.append(g.backward(dout, tape, need_param_grads=False).input)
            total += j
    finally:
        g.mode = mode
    grad = np.concatenate(grads) if grads else np.zeros_like(x, dtype=g.dtype)
    return total, grad


def describe(model: Model) -> dict:
    layers = model.graph.layers
    return {
        "family": model.arch.family,
        "n_params": model.n_params(),
        "layers": [repr(layer) for layer in layers],
    }


def save_model(model: Model, path):
    """Write weights (ADWT container) plus a JSON ArchSpec sidecar at ``path + '.json'``."""
    path = Path(path)
    extra = {"arch": model.arch.to_dict()}
    if model.csp is not None:
        extra["csp"] = {"source_class": model.csp.source_class, "classes": model.csp.classes,
                        "eigenvalues": model.csp.eigenvalues.tolist(), "ridge": model.csp.ridge}
    dc.save_weights(model.graph, path, extra)
    Path(str(path) + ".json").write_text(json.dumps(model.arch.to_dict(), indent=2, sort_keys=True))


def load_model(path) -> Model:
    path = Path(path)
    graph, manifest = dc.load_weights(path)
    sidecar = Path(str(path) + ".json")
    arch_d = json.loads(sidecar.read_text()) if sidecar.exists() else manifest["extra"]["arch"]
    arch = ArchSpec.from_dict(arch_d)
    csp = None
    info = manifest.get("extra", {}).get("csp")
    if info is not None:
        w = graph.layers[0].buffers["weight"].astype(np.float64)
        csp = CspProjection(w, info["source_class"], info["classes"],
                            np.asarray(info["eigenvalues"]), info["ridge"])
    return Model(arch, graph, csp)
