"""Layers with explicit forward/backward passes.

Every layer keeps the activations its backward needs in a ``TapeNode``;
``backward`` consumes that node, so a second backward without a fresh forward
raises. Parameters and their gradients live in plain dicts of numpy arrays.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from bnet import bitcore
from bnet.binarize import (
    ApproxSpec,
    approx_backward,
    approx_forward,
    ste_backward,
    weight_scale,
    weight_scale_backward,
)

log = logging.getLogger(__name__)

FEATURE_MODES = ("real", "smooth", "hard")
WEIGHT_MODES = ("real", "hard")
STE_CLIP = 1.0


@dataclass(frozen=True)
class BinMode:
    """How binarize-flagged layers treat their features and weights."""

    features: str = "real"
    weights: str = "real"
    spec: ApproxSpec = ApproxSpec("tanh", 1.0)
    feature_margin: float = 0.0
    bit_kernels: bool = True

    def __post_init__(self):
        if self.features not in FEATURE_MODES:
            raise ValueError(f"feature mode must be one of {FEATURE_MODES}")
        if self.weights not in WEIGHT_MODES:
            raise ValueError(f"weight mode must be one of {WEIGHT_MODES}")

    @property
    def label(self) -> str:
        if self.features == "smooth":
            return f"smooth({self.spec.kind},{self.spec.lam:g})/{self.weights}"
        return f"{self.features}/{self.weights}"


REAL = BinMode()


@dataclass
class TapeNode:
    layer_id: str
    mode: str
    cache: dict = field(default_factory=dict)


class Layer:
    """Base class; subclasses fill ``params`` and implement forward/backward."""

    def __init__(self, name: str = ""):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.tape: TapeNode | None = None

    def _record(self, label: str = "real", /, **cache) -> None:
        self.tape = TapeNode(self.name, label, cache)

    def _consume(self) -> dict:
        if self.tape is None:
            raise RuntimeError(f"{self.name or type(self).__name__}: backward without a cached forward")
        cache, self.tape = self.tape.cache, None
        return cache

    def _accumulate(self, key: str, g: np.ndarray) -> None:
        if key in self.grads:
            self.grads[key] = self.grads[key] + g
        else:
            self.grads[key] = g

    def zero_grad(self) -> None:
        self.grads = {}


# -- convolution helpers -------------------------------------------------------
# Activations are channels-last [N, H, W, C]; conv weights are [F, kh, kw, C].

def _pad(x, padding, value=0.0):
    if not padding:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)), constant_values=value)


def _out_size(size, k, stride):
    return (size - k) // stride + 1


def im2col(xp, kh, kw, stride):
    """Padded [N, H, W, C] -> ([N * Ho * Wo, kh * kw * C] patches, Ho, Wo)."""
    n, hp, wp, c = xp.shape
    ho, wo = _out_size(hp, kh, stride), _out_size(wp, kw, stride)
    if kh == kw == 1 and stride == 1:
        return xp.reshape(n * ho * wo, c), ho, wo
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, :, di, dj, :] = xp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c), ho, wo


def col2im(gcols, padded_shape, kh, kw, stride, ho, wo):
    n, hp, wp, c = padded_shape
    if kh == kw == 1 and stride == 1:
        return gcols.reshape(padded_shape)
    g6 = gcols.reshape(n, ho, wo, kh, kw, c)
    gx = np.zeros(padded_shape, dtype=gcols.dtype)
    for di in range(kh):
        for dj in range(kw):
            gx[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += g6[:, :, :, di, dj, :]
    return gx


def conv_forward(x, w, stride=1, padding=0, pad_value=0.0):
    """Cross-correlation of NHWC ``x`` with [F, kh, kw, C] ``w``; returns (out, cols, padded shape)."""
    f, kh, kw, c = w.shape
    if x.ndim != 4 or x.shape[3] != c:
        raise ValueError(f"conv expects [N, H, W, {c}] input, got {x.shape}")
    xp = _pad(x, padding, pad_value)
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ValueError("kernel larger than padded input")
    cols, ho, wo = im2col(xp, kh, kw, stride)
    out = (cols @ w.reshape(f, -1).T).reshape(x.shape[0], ho, wo, f)
    return out, cols, xp.shape


def conv_backward(g, cols, w, padded_shape, stride, padding):
    f, kh, kw, c = w.shape
    n, ho, wo, _ = g.shape
    gflat = g.reshape(n * ho * wo, f)
    gw = (gflat.T @ cols).reshape(w.shape)
    gcols = gflat @ w.reshape(f, -1)
    gxp = col2im(gcols, padded_shape, kh, kw, stride, ho, wo)
    if padding:
        gxp = gxp[:, padding:-padding, padding:-padding, :]
    return gxp, gw


def he_init(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# -- real layers ---------------------------------------------------------------

class Conv2d(Layer):
    def __init__(self, c_in, c_out, k, stride=1, padding=0, bias=True, rng=None, dtype=np.float32, name=""):
        super().__init__(name)
        rng = rng or np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.params["w"] = he_init(rng, (c_out, k, k, c_in), c_in * k * k, dtype)
        if bias:
            self.params["b"] = np.zeros(c_out, dtype=dtype)

    def forward(self, x, mode: BinMode = REAL, training=True):
        out, cols, pshape = conv_forward(x, self.params["w"], self.stride, self.padding)
        if "b" in self.params:
            out += self.params["b"]
        self._record("real", cols=cols, pshape=pshape)
        return out

    def backward(self, g):
        c = self._consume()
        gx, gw = conv_backward(g, c["cols"], self.params["w"], c["pshape"], self.stride, self.padding)
        self._accumulate("w", gw)
        if "b" in self.params:
            self._accumulate("b", g.sum(axis=(0, 1, 2)))
        return gx


class Linear(Layer):
    def __init__(self, d_in, d_out, bias=True, rng=None, dtype=np.float32, name=""):
        super().__init__(name)
        rng = rng or np.random.default_rng(0)
        self.params["w"] = he_init(rng, (d_out, d_in), d_in, dtype)
        if bias:
            self.params["b"] = np.zeros(d_out, dtype=dtype)

    def forward(self, x, mode: BinMode = REAL, training=True):
        if x.ndim != 2 or x.shape[1] != self.params["w"].shape[1]:
            raise ValueError(f"linear expects [N, {self.params['w'].shape[1]}], got {x.shape}")
        out = x @ self.params["w"].T
        if "b" in self.params:
            out = out + self.params["b"]
        self._record("real", x=x)
        return out

    def backward(self, g):
        x = self._consume()["x"]
        self._accumulate("w", g.T @ x)
        if "b" in self.params:
            self._accumulate("b", g.sum(axis=0))
        return g @ self.params["w"]


# -- binarized layers ------------------------------------------------------------

def bound_away_from_zero(x, margin):
    """Push values with ``|x| < margin`` out to ``+-margin`` (zero goes to +margin)."""
    if margin <= 0:
        return x
    return np.where(np.abs(x) < margin, np.where(x >= 0, margin, -margin), x).astype(x.dtype)


class _Binarized(Layer):
    """Shared feature/weight binarization for binary conv and linear layers."""

    alpha_granularity = "per_tensor"

    def _features(self, x, mode: BinMode):
        if mode.features == "real":
            return x, x
        xb = bound_away_from_zero(x, mode.feature_margin)
        if mode.features == "smooth":
            return approx_forward(xb, mode.spec).astype(x.dtype), xb
        return bitcore.sign(xb), xb

    def _features_backward(self, gf, xb, mode: BinMode):
        if mode.features == "real":
            return gf
        if mode.features == "smooth":
            return (gf * approx_backward(xb, mode.spec)).astype(gf.dtype)
        return ste_backward(xb, gf, STE_CLIP)

    def _weights(self, mode: BinMode):
        w = self.params["w"]
        if mode.weights == "real":
            return w, None
        alpha = weight_scale(w, self.alpha_granularity).astype(w.dtype)
        if alpha.shape[0] == 1:
            alpha = np.repeat(alpha, w.shape[0])
        return bitcore.sign(w), alpha

    def _weights_backward(self, g_wb, g_alpha, mode: BinMode):
        w = self.params["w"]
        if mode.weights == "real":
            return g_wb
        if self.alpha_granularity == "per_tensor":
            g_alpha = np.asarray(g_alpha).sum(keepdims=True)
        return (ste_backward(w, g_wb, STE_CLIP) + weight_scale_backward(w, g_alpha, self.alpha_granularity)).astype(w.dtype)


class BinaryConv2d(_Binarized):
    """Binary convolution (no bias; the preceding BatchNorm absorbs it).

    Feature padding inserts -1 whenever the features are binarized. With hard
    features and weights at inference time the bit-packed kernel runs.
    """

    def __init__(self, c_in, c_out, k, stride=1, padding=0, rng=None, dtype=np.float32, name="",
                 alpha_granularity="per_tensor"):
        super().__init__(name)
        rng = rng or np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.alpha_granularity = alpha_granularity
        self.params["w"] = np.clip(he_init(rng, (c_out, k, k, c_in), c_in * k * k, dtype), -1, 1)

    def forward(self, x, mode: BinMode = REAL, training=True):
        if mode.features == "hard" and mode.weights == "hard" and mode.bit_kernels and not training:
            return self._forward_bits(x, mode)
        f, xb = self._features(x, mode)
        wb, alpha = self._weights(mode)
        pad_value = 0.0 if mode.features == "real" else -1.0
        raw, cols, pshape = conv_forward(f, wb, self.stride, self.padding, pad_value)
        out = raw if alpha is None else raw * alpha
        self._record(mode.label, cols=cols, pshape=pshape, xb=xb, raw=raw, alpha=alpha, wb=wb, mode=mode)
        return out

    def _forward_bits(self, x, mode: BinMode):
        xb = bound_away_from_zero(x, mode.feature_margin)
        w = self.params["w"]
        _, alpha = self._weights(mode)
        out = bitcore.binary_conv2d(bitcore.pack(xb), bitcore.pack(w), alpha, self.stride, self.padding,
                                    dtype=x.dtype)
        self._record(mode.label + "/bits")
        return np.ascontiguousarray(out.transpose(0, 2, 3, 1))

    def backward(self, g):
        c = self._consume()
        if "cols" not in c:
            raise RuntimeError("bit-kernel forward is inference only")
        mode = c["mode"]
        alpha = c["alpha"]
        g_raw = g if alpha is None else g * alpha
        gf, g_wb = conv_backward(g_raw, c["cols"], c["wb"], c["pshape"], self.stride, self.padding)
        g_alpha = None if alpha is None else (g * c["raw"]).sum(axis=(0, 1, 2))
        self._accumulate("w", self._weights_backward(g_wb, g_alpha, mode))
        return self._features_backward(gf, c["xb"], mode)


class BinaryLinear(_Binarized):
    def __init__(self, d_in, d_out, rng=None, dtype=np.float32, name="", alpha_granularity="per_tensor"):
        super().__init__(name)
        rng = rng or np.random.default_rng(0)
        self.alpha_granularity = alpha_granularity
        self.params["w"] = np.clip(he_init(rng, (d_out, d_in), d_in, dtype), -1, 1)

    def forward(self, x, mode: BinMode = REAL, training=True):
        f, xb = self._features(x, mode)
        wb, alpha = self._weights(mode)
        raw = f @ wb.T
        out = raw if alpha is None else raw * alpha
        self._record(mode.label, f=f, xb=xb, raw=raw, alpha=alpha, wb=wb, mode=mode)
        return out

    def backward(self, g):
        c = self._consume()
        alpha = c["alpha"]
        g_raw = g if alpha is None else g * alpha
        g_alpha = None if alpha is None else (g * c["raw"]).sum(axis=0)
        self._accumulate("w", self._weights_backward(g_raw.T @ c["f"], g_alpha, c["mode"]))
        return self._features_backward(g_raw @ c["wb"], c["xb"], c["mode"])


# -- normalization and activations ------------------------------------------------

class BatchNorm2d(Layer):
    """Batch normalization over every axis but the last (channels-last input)."""

    def __init__(self, c, momentum=0.1, eps=1e-5, dtype=np.float32, name=""):
        super().__init__(name)
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(c, dtype=dtype)
        self.params["beta"] = np.zeros(c, dtype=dtype)
        # running statistics are state, not trainable parameters
        self.buffers = {"mean": np.zeros(c, dtype=dtype), "var": np.ones(c, dtype=dtype)}

    def forward(self, x, mode: BinMode = REAL, training=True):
        c = self.params["gamma"].shape[0]
        if x.shape[-1] != c:
            raise ValueError(f"batchnorm over {c} channels got input {x.shape}")
        axes = tuple(range(x.ndim - 1))
        if training:
            if x.shape[0] < 2:
                raise ValueError("batchnorm in training mode needs a batch of at least 2")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            count = x.size // c
            m = self.momentum
            self.buffers["mean"] = ((1 - m) * self.buffers["mean"] + m * mean).astype(x.dtype)
            self.buffers["var"] = ((1 - m) * self.buffers["var"] + m * var * count / (count - 1)).astype(x.dtype)
        else:
            mean, var = self.buffers["mean"], self.buffers["var"]
        inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - mean) * inv
        out = xhat * self.params["gamma"] + self.params["beta"]
        self._record("real", xhat=xhat, inv=inv, training=training)
        return out

    def backward(self, g):
        c = self._consume()
        xhat, inv = c["xhat"], c["inv"]
        axes = tuple(range(g.ndim - 1))
        self._accumulate("gamma", (g * xhat).sum(axis=axes))
        self._accumulate("beta", g.sum(axis=axes))
        gxhat = g * self.params["gamma"]
        if not c["training"]:
            return gxhat * inv
        m = g.size // g.shape[-1]
        mean_g = gxhat.sum(axis=axes) / m
        mean_gx = (gxhat * xhat).sum(axis=axes) / m
        return (gxhat - mean_g - xhat * mean_gx) * inv


class Activation(Layer):
    """relu, leaky_relu (fixed slope) or prelu (learned slope, scalar or per channel)."""

    KINDS = ("relu", "leaky_relu", "prelu")

    def __init__(self, kind="prelu", channels=1, slope=None, per_channel=True, dtype=np.float32, name=""):
        super().__init__(name)
        if kind not in self.KINDS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        if kind == "leaky_relu":
            self.slope = 0.01 if slope is None else slope
        elif kind == "prelu":
            n = channels if per_channel else 1
            self.params["slope"] = np.full(n, 0.25 if slope is None else slope, dtype=dtype)

    def forward(self, x, mode: BinMode = REAL, training=True):
        neg = x < 0
        self._record("real", x=x, neg=neg)
        if self.kind == "relu":
            return np.where(neg, 0, x).astype(x.dtype)
        if self.kind == "leaky_relu":
            return np.where(neg, self.slope * x, x).astype(x.dtype)
        return np.where(neg, self.params["slope"] * x, x).astype(x.dtype)

    def backward(self, g):
        c = self._consume()
        x, neg = c["x"], c["neg"]
        if self.kind == "relu":
            return np.where(neg, 0, g).astype(g.dtype)
        if self.kind == "leaky_relu":
            return np.where(neg, self.slope * g, g).astype(g.dtype)
        s = self.params["slope"]
        contrib = np.where(neg, x * g, 0)
        gs = contrib.sum(axis=tuple(range(x.ndim - 1)))
        if s.shape[0] == 1:
            gs = gs.sum(keepdims=True)
        self._accumulate("slope", gs.astype(s.dtype))
        return np.where(neg, s * g, g).astype(g.dtype)


class Sigmoid(Layer):
    def forward(self, x, mode: BinMode = REAL, training=True):
        y = (0.5 * (1 + np.tanh(0.5 * x))).astype(x.dtype)
        self._record("real", y=y)
        return y

    def backward(self, g):
        y = self._consume()["y"]
        return g * y * (1 - y)


# -- shape plumbing ----------------------------------------------------------------

class MaxPool2d(Layer):
    def __init__(self, k=2, stride=None, name=""):
        super().__init__(name)
        self.k = k
        self.stride = stride or k

    def forward(self, x, mode: BinMode = REAL, training=True):
        k, s = self.k, self.stride
        n, h, w, c = x.shape
        if h < k or w < k:
            raise ValueError(f"maxpool {k} on input {x.shape}")
        ho, wo = _out_size(h, k, s), _out_size(w, k, s)
        if k == s:
            blocks = x[:, :ho * k, :wo * k, :].reshape(n, ho, k, wo, k, c).transpose(0, 1, 3, 2, 4, 5)
            flat = blocks.reshape(n, ho, wo, k * k, c)
        else:
            win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
            flat = win.transpose(0, 1, 2, 4, 5, 3).reshape(n, ho, wo, k * k, c)
        arg = flat.argmax(axis=3)
        out = np.take_along_axis(flat, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
        self._record("real", arg=arg, shape=x.shape)
        return out

    def backward(self, g):
        c = self._consume()
        k, s = self.k, self.stride
        arg, shape = c["arg"], c["shape"]
        n, ho, wo, ch = g.shape
        gx = np.zeros(shape, dtype=g.dtype)
        if k == s:
            # non-overlapping windows: scatter straight into the blocks
            onehot = (arg[:, :, :, None, :] == np.arange(k * k)[:, None]) * g[:, :, :, None, :]
            blocks = onehot.reshape(n, ho, wo, k, k, ch).transpose(0, 1, 3, 2, 4, 5)
            gx[:, :ho * k, :wo * k, :] = blocks.reshape(n, ho * k, wo * k, ch)
            return gx
        di, dj = np.divmod(arg, k)
        nn, ii, jj, cc = np.indices(arg.shape)
        np.add.at(gx, (nn, ii * s + di, jj * s + dj, cc), g)
        return gx


class Upsample(Layer):
    def __init__(self, scale=2, name=""):
        super().__init__(name)
        self.scale = scale

    def forward(self, x, mode: BinMode = REAL, training=True):
        s = self.scale
        self._record("real")
        return x.repeat(s, axis=1).repeat(s, axis=2)

    def backward(self, g):
        self._consume()
        s = self.scale
        n, h, w, c = g.shape
        return g.reshape(n, h // s, s, w // s, s, c).sum(axis=(2, 4))


class GlobalAvgPool(Layer):
    def forward(self, x, mode: BinMode = REAL, training=True):
        self._record("real", shape=x.shape)
        return x.mean(axis=(1, 2))

    def backward(self, g):
        shape = self._consume()["shape"]
        return np.broadcast_to(g[:, None, None, :] / (shape[1] * shape[2]), shape).astype(g.dtype)


class Flatten(Layer):
    def forward(self, x, mode: BinMode = REAL, training=True):
        self._record("real", shape=x.shape)
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._consume()["shape"])


def weight_histogram(w, bins: int = 50, value_range=(-1.0, 1.0)):
    """Bin counts and edges of a weight tensor; out-of-range values land in the edge bins."""
    w = np.clip(np.asarray(w, dtype=np.float64).ravel(), value_range[0], value_range[1])
    counts, edges = np.histogram(w, bins=bins, range=value_range)
    return counts, edges
