"""
Layer-chain reverse-mode differentiation on NumPy arrays.

A :class:`Graph` is an ordered list of layers with a parameter store. Forward
passes record a :class:`Tape` of per-layer caches; :meth:`Graph.backward`
walks the tape in reverse and returns gradients for every parameter and for
the input batch. Tapes are owned by the caller, so a frozen graph can be
shared between workers as long as each keeps its own tape.

Arrays are float32 by default. ``Graph.astype(np.float64)`` returns a copy
for gradient verification.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_GUARD = 1e-7
MAGNITUDE_GUARD = 1e-12


class ShapeError(ValueError):
    """Input or layer shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


class GraphStateError(RuntimeError):
    """Operation called in the wrong order (e.g. backward before forward)."""


def sign(a: np.ndarray) -> np.ndarray:
    # np.sign already maps 0 -> 0; kept as a named helper so call sites read clearly
    return np.sign(a)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------


class Layer:
    """Base class. Subclasses implement ``build``, ``forward`` and ``backward``.

    ``forward(x, train, rng)`` returns ``(y, cache)``; ``backward(dy, cache,
    need_param_grads)`` returns ``(dx, grads)`` where ``grads`` maps parameter
    names to arrays.
    """

    kind = "Layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.in_shape: tuple[int, ...] | None = None
        self.out_shape: tuple[int, ...] | None = None

    def build(self, in_shape: tuple[int, ...], rng: np.random.Generator) -> tuple[int, ...]:
        self.in_shape = tuple(in_shape)
        self.out_shape = self._build(self.in_shape, rng)
        return self.out_shape

    def _build(self, in_shape, rng):
        return in_shape

    def forward(self, x, train, rng):
        raise NotImplementedError

    def backward(self, dy, cache, need_param_grads=True):
        raise NotImplementedError

    def config(self) -> dict:
        return {}

    def spec(self) -> dict:
        return {"kind": self.kind, **self.config()}

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{self.kind}({args})"


def _uniform_fan_in(rng, shape, fan_in):
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2D(Layer):
    """2-D convolution over ``(N, C, H, W)`` with zero padding and groups."""

    kind = "Conv2D"

    def __init__(self, out_channels, kernel, stride=1, padding=0, groups=1, bias=True):
        super().__init__()
        self.out_channels = int(out_channels)
        self.kernel = _pair(kernel)
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        self.groups = int(groups)
        self.bias = bool(bias)

    def config(self):
        return dict(out_channels=self.out_channels, kernel=list(self.kernel),
                    stride=list(self.stride), padding=list(self.padding),
                    groups=self.groups, bias=self.bias)

    def _build(self, in_shape, rng):
        if len(in_shape) != 3:
            raise ShapeError(f"Conv2D expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        g = self.groups
        if g < 1 or c % g or self.out_channels % g:
            raise ShapeError(
                f"groups={g} must divide in_channels={c} and out_channels={self.out_channels}")
        kh, kw = self.kernel
        ph, pw = self.padding
        sh, sw = self.stride
        if kh > h + 2 * ph or kw > w + 2 * pw:
            raise ShapeError(f"kernel {self.kernel} larger than padded input {(h, w)}")
        fan_in = (c // g) * kh * kw
        self.params["W"] = _uniform_fan_in(rng, (self.out_channels, c // g, kh, kw), fan_in)
        if self.bias:
            self.params["b"] = np.zeros(self.out_channels)
        ho = (h + 2 * ph - kh) // sh + 1
        wo = (w + 2 * pw - kw) // sw + 1
        return (self.out_channels, ho, wo)

    def forward(self, x, train, rng):
        n, c, h, w = x.shape
        kh, kw = self.kernel
        ph, pw = self.padding
        sh, sw = self.stride
        g = self.groups
        cg, og = c // g, self.out_channels // g
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        ho, wo = win.shape[2], win.shape[3]
        cols = (win.reshape(n, g, cg, ho, wo, kh, kw)
                .transpose(1, 0, 3, 4, 2, 5, 6)
                .reshape(g, n * ho * wo, cg * kh * kw))
        wmat = self.params["W"].reshape(g, og, cg * kh * kw).transpose(0, 2, 1)
        out = np.matmul(cols, wmat)
        y = out.reshape(g, n, ho, wo, og).transpose(1, 0, 4, 2, 3).reshape(n, g * og, ho, wo)
        if self.bias:
            y = y + self.params["b"][None, :, None, None]
        return y, (cols, xp.shape, (ho, wo))

    def backward(self, dy, cache, need_param_grads=True):
        cols, xp_shape, (ho, wo) = cache
        n, _, hp, wp = xp_shape
        kh, kw = self.kernel
        ph, pw = self.padding
        sh, sw = self.stride
        g = self.groups
        c = xp_shape[1]
        cg, og = c // g, self.out_channels // g
        d = dy.reshape(n, g, og, ho, wo).transpose(1, 0, 3, 4, 2).reshape(g, n * ho * wo, og)
        grads = {}
        wmat = self.params["W"].reshape(g, og, cg * kh * kw)
        if need_param_grads:
            dw = np.matmul(cols.transpose(0, 2, 1), d)
            grads["W"] = dw.transpose(0, 2, 1).reshape(self.params["W"].shape)
            if self.bias:
                grads["b"] = dy.sum(axis=(0, 2, 3))
        dcols = np.matmul(d, wmat).reshape(g, n, ho, wo, cg, kh, kw)
        dcols = dcols.transpose(1, 0, 4, 2, 3, 5, 6)  # n, g, cg, ho, wo, kh, kw
        dxp = np.zeros((n, g, cg, hp, wp), dtype=dy.dtype)
        for i in range(kh):
            hs = slice(i, i + sh * (ho - 1) + 1, sh)
            for j in range(kw):
                dxp[:, :, :, hs, j:j + sw * (wo - 1) + 1:sw] += dcols[..., i, j]
        dxp = dxp.reshape(n, c, hp, wp)
        dx = dxp[:, :, ph:hp - ph, pw:wp - pw] if (ph or pw) else dxp
        return dx, grads


class Dense(Layer):
    kind = "Dense"

    def __init__(self, out_features, bias=True):
        super().__init__()
        self.out_features = int(out_features)
        self.bias = bool(bias)

    def config(self):
        return dict(out_features=self.out_features, bias=self.bias)

    def _build(self, in_shape, rng):
        if len(in_shape) != 1:
            raise ShapeError(f"Dense expects flat input, got {in_shape}; add Flatten")
        self.params["W"] = _uniform_fan_in(rng, (in_shape[0], self.out_features), in_shape[0])
        if self.bias:
            self.params["b"] = np.zeros(self.out_features)
        return (self.out_features,)

    def forward(self, x, train, rng):
        y = x @ self.params["W"]
        if self.bias:
            y = y + self.params["b"]
        return y, x

    def backward(self, dy, x, need_param_grads=True):
        grads = {}
        if need_param_grads:
            grads["W"] = x.T @ dy
            if self.bias:
                grads["b"] = dy.sum(axis=0)
        return dy @ self.params["W"].T, grads


class Activation(Layer):
    """Elementwise ELU / ReLU / Square / Log, or Softmax over the last axis."""

    kind = "Activation"
    FUNCS = ("ELU", "ReLU", "Square", "Log", "Softmax")

    def __init__(self, func):
        super().__init__()
        if func not in self.FUNCS:
            raise ValueError(f"unknown activation {func!r}")
        self.func = func

    def config(self):
        return dict(func=self.func)

    def forward(self, x, train, rng):
        f = self.func
        if f == "ELU":
            y = np.where(x > 0, x, np.expm1(np.minimum(x, 0)))
        elif f == "ReLU":
            y = np.maximum(x, 0)
        elif f == "Square":
            y = x * x
        elif f == "Log":
            y = np.log(np.maximum(x, LOG_GUARD))
        else:
            z = x - x.max(axis=-1, keepdims=True)
            e = np.exp(z)
            y = e / e.sum(axis=-1, keepdims=True)
        return y, (x, y)

    def backward(self, dy, cache, need_param_grads=True):
        x, y = cache
        f = self.func
        if f == "ELU":
            dx = dy * np.where(x > 0, 1, y + 1)
        elif f == "ReLU":
            dx = dy * (x > 0)
        elif f == "Square":
            dx = 2 * x * dy
        elif f == "Log":
            dx = np.where(x > LOG_GUARD, dy / np.maximum(x, LOG_GUARD), 0)
        else:
            dx = y * (dy - (dy * y).sum(axis=-1, keepdims=True))
        return dx.astype(dy.dtype, copy=False), {}


class Pool(Layer):
    """Max or average pooling over the last two axes of ``(N, C, H, W)``."""

    kind = "Pool"

    def __init__(self, mode, window, stride=None):
        super().__init__()
        if mode not in ("Max", "Avg"):
            raise ValueError(f"pool mode must be Max or Avg, got {mode!r}")
        self.mode = mode
        self.window = _pair(window)
        self.stride = _pair(stride) if stride is not None else self.window

    def config(self):
        return dict(mode=self.mode, window=list(self.window), stride=list(self.stride))

    def _build(self, in_shape, rng):
        if len(in_shape) != 3:
            raise ShapeError(f"Pool expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        kh, kw = self.window
        if kh > h or kw > w:
            raise ShapeError(f"pool window {self.window} exceeds input extent {(h, w)}")
        sh, sw = self.stride
        return (c, (h - kh) // sh + 1, (w - kw) // sw + 1)

    def forward(self, x, train, rng):
        kh, kw = self.window
        sh, sw = self.stride
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        if self.mode == "Avg":
            return win.mean(axis=(4, 5)), (x.shape, win.shape[2:4], None)
        flat = win.reshape(win.shape[:4] + (kh * kw,))
        idx = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, win.shape[2:4], idx)

    def backward(self, dy, cache, need_param_grads=True):
        x_shape, (ho, wo), idx = cache
        kh, kw = self.window
        sh, sw = self.stride
        dx = np.zeros(x_shape, dtype=dy.dtype)
        if self.mode == "Avg":
            share = dy / (kh * kw)
        for i in range(kh):
            hs = slice(i, i + sh * (ho - 1) + 1, sh)
            for j in range(kw):
                ws = slice(j, j + sw * (wo - 1) + 1, sw)
                if self.mode == "Avg":
                    dx[:, :, hs, ws] += share
                else:
                    dx[:, :, hs, ws] += dy * (idx == i * kw + j)
        return dx, {}


class BatchNorm(Layer):
    """Per-channel normalization (axis 1); running stats used in eval mode."""

    kind = "BatchNorm"

    def __init__(self, momentum=0.9, epsilon=1e-5):
        super().__init__()
        self.momentum = float(momentum)
        self.epsilon = float(epsilon)

    def config(self):
        return dict(momentum=self.momentum, epsilon=self.epsilon)

    def _build(self, in_shape, rng):
        c = in_shape[0]
        self.params["gamma"] = np.ones(c)
        self.params["beta"] = np.zeros(c)
        self.buffers["running_mean"] = np.zeros(c)
        self.buffers["running_var"] = np.ones(c)
        return in_shape

    def _bshape(self, x):
        return (1, x.shape[1]) + (1,) * (x.ndim - 2)

    def forward(self, x, train, rng):
        axes = (0,) + tuple(range(2, x.ndim))
        bs = self._bshape(x)
        gamma = self.params["gamma"].reshape(bs)
        beta = self.params["beta"].reshape(bs)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.buffers["running_mean"] = (m * self.buffers["running_mean"] + (1 - m) * mean).astype(x.dtype)
            self.buffers["running_var"] = (m * self.buffers["running_var"] + (1 - m) * var).astype(x.dtype)
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mean.reshape(bs)) * inv.reshape(bs)
        return gamma * xhat + beta, (xhat, inv, train)

    def backward(self, dy, cache, need_param_grads=True):
        xhat, inv, train = cache
        axes = (0,) + tuple(range(2, dy.ndim))
        bs = self._bshape(dy)
        gamma = self.params["gamma"].reshape(bs)
        grads = {}
        if need_param_grads:
            grads["gamma"] = (dy * xhat).sum(axis=axes)
            grads["beta"] = dy.sum(axis=axes)
        dxhat = dy * gamma
        if not train:
            return dxhat * inv.reshape(bs), grads
        m = dy.size // dy.shape[1]
        dx = (inv.reshape(bs) / m) * (
            m * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return dx, grads


class Dropout(Layer):
    kind = "Dropout"

    def __init__(self, rate):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = float(rate)

    def config(self):
        return dict(rate=self.rate)

    def forward(self, x, train, rng):
        if not train or self.rate == 0:
            return x, None
        mask = (rng.random(x.shape) >= self.rate).astype(x.dtype) / (1 - self.rate)
        return x * mask, mask

    def backward(self, dy, mask, need_param_grads=True):
        return (dy if mask is None else dy * mask), {}


class Flatten(Layer):
    kind = "Flatten"

    def _build(self, in_shape, rng):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape, need_param_grads=True):
        return dy.reshape(shape), {}


class Reshape(Layer):
    kind = "Reshape"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(int(s) for s in shape)

    def config(self):
        return dict(shape=list(self.shape))

    def _build(self, in_shape, rng):
        if int(np.prod(in_shape)) != int(np.prod(self.shape)):
            raise ShapeError(f"cannot reshape {in_shape} to {self.shape}")
        return self.shape

    def forward(self, x, train, rng):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, dy, shape, need_param_grads=True):
        return dy.reshape(shape), {}


class ChannelMix(Layer):
    """Fixed (non-trainable) linear map over the channel axis of ``(N, C, T)``."""

    kind = "ChannelMix"

    def __init__(self, weight):
        super().__init__()
        self.buffers["weight"] = np.asarray(weight, dtype=float)

    def config(self):
        return dict(out_channels=int(self.buffers["weight"].shape[0]),
                    in_channels=int(self.buffers["weight"].shape[1]))

    def _build(self, in_shape, rng):
        w = self.buffers["weight"]
        if len(in_shape) != 2 or in_shape[0] != w.shape[1]:
            raise ShapeError(f"ChannelMix weight {w.shape} incompatible with input {in_shape}")
        return (w.shape[0], in_shape[1])

    def forward(self, x, train, rng):
        w = self.buffers["weight"].astype(x.dtype, copy=False)
        return np.einsum("oc,nct->not", w, x), None

    def backward(self, dy, cache, need_param_grads=True):
        w = self.buffers["weight"].astype(dy.dtype, copy=False)
        return np.einsum("oc,not->nct", w, dy), {}


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


class STFTMagnitude(Layer):
    """Hann-windowed DFT magnitude: ``(N, C, T) -> (N, C, F, M)``.

    Magnitude is ``sqrt(re^2 + im^2 + 1e-12)`` so the map stays differentiable.
    """

    kind = "STFTMagnitude"

    def __init__(self, window_len, hop):
        super().__init__()
        self.window_len = int(window_len)
        self.hop = int(hop)
        if self.hop < 1:
            raise ValueError("hop must be >= 1")
        n = self.window_len
        k = np.arange(n // 2 + 1)
        ang = 2 * np.pi * np.outer(np.arange(n), k) / n
        win = hann(n)[:, None]
        self.buffers["basis_re"] = win * np.cos(ang)
        self.buffers["basis_im"] = -win * np.sin(ang)

    def config(self):
        return dict(window_len=self.window_len, hop=self.hop)

    def _build(self, in_shape, rng):
        if len(in_shape) != 2:
            raise ShapeError(f"STFTMagnitude expects (C, T), got {in_shape}")
        c, t = in_shape
        if self.window_len > t:
            raise ShapeError(f"window {self.window_len} longer than epoch length {t}")
        m = (t - self.window_len) // self.hop + 1
        return (c, self.window_len // 2 + 1, m)

    def forward(self, x, train, rng):
        frames = sliding_window_view(x, self.window_len, axis=2)[:, :, ::self.hop]
        br = self.buffers["basis_re"].astype(x.dtype, copy=False)
        bi = self.buffers["basis_im"].astype(x.dtype, copy=False)
        re = frames @ br
        im = frames @ bi
        mag = np.sqrt(re * re + im * im + MAGNITUDE_GUARD)
        return mag.transpose(0, 1, 3, 2), (re, im, mag, x.shape)

    def backward(self, dy, cache, need_param_grads=True):
        re, im, mag, x_shape = cache
        d = dy.transpose(0, 1, 3, 2)
        br = self.buffers["basis_re"].astype(dy.dtype, copy=False)
        bi = self.buffers["basis_im"].astype(dy.dtype, copy=False)
        dframes = (d * re / mag) @ br.T + (d * im / mag) @ bi.T
        dx = np.zeros(x_shape, dtype=dy.dtype)
        for m in range(dframes.shape[2]):
            s = m * self.hop
            dx[:, :, s:s + self.window_len] += dframes[:, :, m]
        return dx, {}


LAYER_TYPES = {cls.kind: cls for cls in
               (Conv2D, Dense, Activation, Pool, BatchNorm, Dropout, Flatten, Reshape,
                ChannelMix, STFTMagnitude)}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "ChannelMix":
        c_out, c_in = spec["out_channels"], spec["in_channels"]
        return ChannelMix(np.zeros((c_out, c_in)))
    cls = LAYER_TYPES.get(kind)
    if cls is None:
        raise ValueError(f"unknown layer kind {kind!r}")
    return cls(**spec)


# --------------------------------------------------------------------------
# Graph
# --------------------------------------------------------------------------


@dataclass
class Tape:
    """Per-layer caches from one forward pass."""

    caches: list
    train: bool
    input_shape: tuple


@dataclass
class Gradients:
    params: dict[str, np.ndarray]
    input: np.ndarray


def _check_finite(a: np.ndarray, what: str):
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite values in {what}")


def _positive_output(layers: Sequence[Layer], i: int) -> bool:
    """True if layer ``i`` is guaranteed to emit strictly non-negative values feeding Log."""
    layer = layers[i]
    if isinstance(layer, Activation) and layer.func == "Square":
        return True
    if isinstance(layer, Pool) and layer.mode == "Avg" and i > 0:
        return _positive_output(layers, i - 1)
    return False


class Graph:
    """Ordered layer chain with a parameter store and a train/eval mode flag.

    Parameters
    ----------
    input_shape : tuple
        Per-example input shape, e.g. ``(C, T)``.
    layers : list of Layer
        Layers applied in order. Shapes are inferred and validated here.
    seed : int
        Seeds parameter initialization and the dropout generator.
    dtype : numpy dtype
        Storage precision for parameters; inputs are cast to it.
    """

    def __init__(self, input_shape, layers: Sequence[Layer], seed: int = 0, dtype=np.float32):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = list(layers)
        self.dtype = np.dtype(dtype)
        self.mode = "eval"
        self.seed = int(seed)
        init_rng = np.random.default_rng(self.seed)
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Activation) and layer.func == "Log":
                if i == 0 or not _positive_output(self.layers, i - 1):
                    raise ShapeError(
                        f"Log activation at layer {i} must follow Square or Avg-Pool of squares")
            shape = layer.build(shape, init_rng)
        self.output_shape = shape
        self._cast_store(self.dtype)
        self.rng = np.random.default_rng([self.seed, 1])
        self._last_tape: Tape | None = None

    def _cast_store(self, dtype):
        for layer in self.layers:
            for k, v in layer.params.items():
                layer.params[k] = np.ascontiguousarray(v, dtype=dtype)
            for k, v in layer.buffers.items():
                layer.buffers[k] = np.ascontiguousarray(v, dtype=dtype)

    # ---- parameter store -------------------------------------------------

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                yield f"{i}.{k}", v

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for k, v in layer.buffers.items():
                yield f"{i}.{k}", v

    def get_param(self, name: str) -> np.ndarray:
        i, k = name.split(".", 1)
        return self.layers[int(i)].params[k]

    def set_param(self, name: str, value: np.ndarray):
        i, k = name.split(".", 1)
        layer = self.layers[int(i)]
        if layer.params[k].shape != value.shape:
            raise ShapeError(f"parameter {name} shape {layer.params[k].shape} != {value.shape}")
        layer.params[k] = np.ascontiguousarray(value, dtype=self.dtype)

    def state(self) -> dict[str, np.ndarray]:
        """Copy of all parameters and buffers (buffers prefixed with ``buf:``)."""
        st = {k: v.copy() for k, v in self.named_params()}
        st.update({"buf:" + k: v.copy() for k, v in self.named_buffers()})
        return st

    def load_state(self, state: dict[str, np.ndarray]):
        for k, v in state.items():
            if k.startswith("buf:"):
                i, name = k[4:].split(".", 1)
                self.layers[int(i)].buffers[name] = np.array(v, dtype=self.dtype)
            else:
                self.set_param(k, np.asarray(v))

    def n_params(self) -> int:
        return int(sum(v.size for _, v in self.named_params()))

    def astype(self, dtype) -> "Graph":
        """Deep copy with parameters, buffers and computation in ``dtype``."""
        g = Graph.__new__(Graph)
        g.input_shape = self.input_shape
        g.output_shape = self.output_shape
        g.dtype = np.dtype(dtype)
        g.mode = self.mode
        g.seed = self.seed
        g.rng = np.random.default_rng([self.seed, 1])
        g._last_tape = None
        g.layers = []
        for layer in self.layers:
            new = layer_from_spec(layer.spec())
            new.in_shape, new.out_shape = layer.in_shape, layer.out_shape
            new.params = {k: v.copy() for k, v in layer.params.items()}
            new.buffers = {k: v.copy() for k, v in layer.buffers.items()}
            g.layers.append(new)
        g._cast_store(g.dtype)
        return g

    def copy(self) -> "Graph":
        g = self.astype(self.dtype)
        g.rng = np.random.default_rng([self.seed, 1])
        return g

    def reseed(self, seed: int):
        self.rng = np.random.default_rng([int(seed), 1])

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    # ---- passes ------------------------------------------------------------

    def forward(self, batch: np.ndarray, record: bool = True):
        """Run the chain; returns ``(output, tape)``. Tape is ``None`` when not recording."""
        x = np.asarray(batch)
        if x.ndim != len(self.input_shape) + 1 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"batch shape {x.shape} does not match graph input (N, *{self.input_shape})")
        x = x.astype(self.dtype, copy=False)
        train = self.mode == "train"
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, train, self.rng)
            if record:
                caches.append(cache)
        _check_finite(x, "forward output")
        tape = Tape(caches, train, batch.shape) if record else None
        self._last_tape = tape
        return x, tape

    def backward(self, grad_output: np.ndarray, tape: Tape | None = None,
                 need_param_grads: bool = True) -> Gradients:
        """Propagate ``dJ/d(output)`` back to parameters and input."""
        tape = tape if tape is not None else self._last_tape
        if tape is None:
            raise GraphStateError("backward called before forward")
        d = np.asarray(grad_output, dtype=self.dtype)
        grads: dict[str, np.ndarray] = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            d, g = layer.backward(d, tape.caches[i], need_param_grads)
            for k, v in g.items():
                grads[f"{i}.{k}"] = v
        if tuple(d.shape) != tuple(tape.input_shape):
            raise ShapeError(f"input gradient shape {d.shape} != batch shape {tape.input_shape}")
        _check_finite(d, "input gradient")
        for k, v in grads.items():
            _check_finite(v, f"gradient of {k}")
        return Gradients(grads, d)

    def summary(self) -> str:
        lines = [f"input {self.input_shape}"]
        for i, layer in enumerate(self.layers):
            n = sum(v.size for v in layer.params.values())
            lines.append(f"{i:2d} {layer!r:60s} -> {layer.out_shape}  params={n}")
        lines.append(f"total params {self.n_params()}")
        return "\n".join(lines)


def forward(graph: Graph, batch: np.ndarray) -> np.ndarray:
    out, _ = graph.forward(batch)
    return out


def backward(graph: Graph, grad_output: np.ndarray) -> Gradients:
    """Backward for the most recent :func:`forward` on ``graph``."""
    return graph.backward(grad_output)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray, class_weights=None,
                  reduction: str = "mean") -> tuple[float, np.ndarray]:
    """Softmax cross entropy and its gradient w.r.t. the logits.

    With ``reduction="mean"`` the loss is ``sum_i w_{y_i} CE_i / sum_i w_{y_i}``;
    ``"sum"`` drops the denominator, which keeps each example's gradient
    independent of the rest of the batch.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must be {n} class indices in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    p = e / s
    rows = np.arange(n)
    logp_y = z[rows, labels] - np.log(s[:, 0])
    w = np.ones(n, dtype=logits.dtype) if class_weights is None else \
        np.asarray(class_weights, dtype=logits.dtype)[labels]
    denom = w.sum() if reduction == "mean" else 1.0
    loss = float(-(w * logp_y).sum() / denom)
    dlogits = p.copy()
    # 1 - p_y computed as the sum of the other probabilities: stays nonzero when p_y rounds to 1
    others = p.copy()
    others[rows, labels] = 0
    dlogits[rows, labels] = -others.sum(axis=1)
    dlogits *= (w / denom)[:, None]
    return loss, dlogits.astype(logits.dtype, copy=False)


def projection_loss(direction: np.ndarray) -> Callable:
    """Loss ``sum(direction * output)``; used by gradient checks."""

    def loss(out, _labels=None):
        return float((direction * out).sum()), direction.astype(out.dtype)

    return loss


# --------------------------------------------------------------------------
# Finite-difference verification
# --------------------------------------------------------------------------


@dataclass
class CheckReport:
    max_rel_err: float
    worst_coordinate: tuple
    n_checked: int
    passed: bool
    per_target: dict = field(default_factory=dict)
    n_skipped: int = 0


def _kink_signature(graph: Graph, tape: Tape) -> list:
    """Discrete branch choices of the non-smooth layers for one forward pass."""
    sig = []
    for layer, cache in zip(graph.layers, tape.caches):
        if isinstance(layer, Pool) and layer.mode == "Max":
            sig.append(cache[2])
        elif isinstance(layer, Activation) and layer.func in ("ReLU", "ELU"):
            sig.append(cache[0] > 0)
        elif isinstance(layer, Activation) and layer.func == "Log":
            sig.append(cache[0] > LOG_GUARD)
    return sig


def _same_signature(a, b) -> bool:
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_diff_check(graph: Graph, batch: np.ndarray, h: float = 1e-4, tol: float = 1e-5,
                      param_fraction: float = 0.05, seed: int = 0, loss=None,
                      max_input_coords: int | None = None, floor: float = 1e-8,
                      rel_floor: float = 1e-3) -> CheckReport:
    """Compare reverse-mode gradients with central differences.

    The graph is copied to float64 and put in eval mode. ``loss(out)`` must
    return ``(J, dJ/dout)``; by default a fixed random projection of the
    output is used. All input coordinates are checked (or a random subset of
    ``max_input_coords``) plus ``param_fraction`` of each parameter tensor.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, f)`` with
    ``f = max(floor, rel_floor * max|a|)`` over the same tensor, so
    coordinates whose gradient is far below the tensor's scale are judged
    against that scale instead of against differencing roundoff.

    Coordinates whose +h and -h passes take different branches in a max-pool,
    ReLU, ELU or log guard straddle a kink; those are retried with h/10 and
    h/100 and skipped (counted in ``n_skipped``) if every step straddles.
    """
    batch = np.asarray(batch)
    if batch.shape[0] == 0:
        raise ValueError("finite_diff_check needs a non-empty batch")
    g = graph.astype(np.float64).eval()
    x = batch.astype(np.float64)
    rng = np.random.default_rng(seed)
    if loss is None:
        out0, _ = g.forward(x, record=False)
        loss = projection_loss(rng.standard_normal(out0.shape))

    def J():
        out, t = g.forward(x)
        return loss(out)[0], _kink_signature(g, t)

    out, tape = g.forward(x)
    _, dout = loss(out)
    grads = g.backward(dout, tape)

    worst = (0.0, ("input", ()))
    per_target = {}
    n_checked = 0
    n_skipped = 0

    def probe(target: np.ndarray, analytic: np.ndarray, coords, name):
        nonlocal worst, n_checked, n_skipped
        errs = []
        f = max(floor, rel_floor * float(np.abs(analytic).max()))
        for c in coords:
            c = tuple(int(v) for v in c)
            orig = target[c]
            num = None
            for step in (h, h / 10, h / 100):
                target[c] = orig + step
                jp, sig_p = J()
                target[c] = orig - step
                jm, sig_m = J()
                target[c] = orig
                if _same_signature(sig_p, sig_m):
                    num = (jp - jm) / (2 * step)
                    break
            if num is None:
                n_skipped += 1
                continue
            e = float(rel_err(analytic[c], num, f))
            errs.append(e)
            if e > worst[0]:
                worst = (e, (name, c))
        n_checked += len(errs)
        per_target[name] = max(errs) if errs else 0.0

    all_x = np.argwhere(np.ones(x.shape, dtype=bool))
    if max_input_coords is not None and len(all_x) > max_input_coords:
        all_x = all_x[rng.choice(len(all_x), max_input_coords, replace=False)]
    probe(x, grads.input, all_x, "input")
    for name, p in g.named_params():
        coords = np.argwhere(np.ones(p.shape, dtype=bool))
        k = max(1, int(round(param_fraction * len(coords))))
        coords = coords[rng.choice(len(coords), k, replace=False)]
        probe(p, grads.params[name], coords, name)
    return CheckReport(worst[0], worst[1], n_checked, worst[0] <= tol, per_target, n_skipped)


# --------------------------------------------------------------------------
# "ADWT" parameter container
# --------------------------------------------------------------------------

WEIGHTS_MAGIC = b"ADWT"
WEIGHTS_VERSION = 1


class ContainerError(ValueError):
    pass


def save_weights(graph: Graph, path_or_file, extra: dict | None = None):
    """Write magic, u16 version, u32 manifest length, JSON manifest, float32 tensors."""
    tensors = list(graph.named_params()) + [("buf:" + k, v) for k, v in graph.named_buffers()]
    manifest = {
        "input_shape": list(graph.input_shape),
        "seed": graph.seed,
        "layers": [layer.spec() for layer in graph.layers],
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors],
    }
    if extra:
        manifest["extra"] = extra
    blob = json.dumps(manifest, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    buf.write(struct.pack("<HI", WEIGHTS_VERSION, len(blob)))
    buf.write(blob)
    for _, v in tensors:
        buf.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    data = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        with open(path_or_file, "wb") as f:
            f.write(data)


def load_weights(path_or_file) -> tuple[Graph, dict]:
    """Rebuild a graph from an ADWT container; returns ``(graph, manifest)``."""
    if hasattr(path_or_file, "read"):
        data = path_or_file.read()
    else:
        with open(path_or_file, "rb") as f:
            data = f.read()
    if data[:4] != WEIGHTS_MAGIC:
        raise ContainerError(f"bad magic {data[:4]!r}, expected {WEIGHTS_MAGIC!r}")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != WEIGHTS_VERSION:
        raise ContainerError(f"unsupported ADWT version {version}")
    off = 10
    manifest = json.loads(data[off:off + hlen])
    off += hlen
    arrays = {}
    for t in manifest["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        if off + 4 * n > len(data):
            raise ContainerError(f"truncated tensor {t['name']}")
        arrays[t["name"]] = np.frombuffer(data, "<f4", n, off).reshape(t["shape"])
        off += 4 * n
    layers = []
    for spec in manifest["layers"]:
        layers.append(layer_from_spec(spec))
    for i, layer in enumerate(layers):
        if isinstance(layer, ChannelMix):
            layer.buffers["weight"] = np.array(arrays[f"buf:{i}.weight"], dtype=float)
    graph = Graph(manifest["input_shape"], layers, seed=manifest.get("seed", 0))
    graph.load_state(arrays)
    return graph, manifest
