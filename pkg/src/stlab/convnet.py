"""Fully convolutional encoder / hidden / decoder networks in plain numpy.

Tensors are batch-first, ``(batch, features, *spatial)``, for any number of
spatial dimensions.  Filters are ``(out_features, in_features, *K^d)`` and are
applied as cross-correlations (the usual deep-learning convention; this is a
convolution with a flipped filter and leaves every L1 norm unchanged).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KINDS = ("encoder", "hidden", "decoder")
NONLINEARITIES = ("leaky_relu", "relu", "tanh", "identity")
PADDINGS = ("zero_same", "none")
UPSAMPLES = ("transposed", "nearest")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int
    out_features: int
    kernel_width: int
    resample: int = 1
    nonlinearity: str = "leaky_relu"
    slope: float = 0.01
    padding: str = "zero_same"
    upsample: str = "transposed"
    bias: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.padding not in PADDINGS:
            raise ValueError(f"unknown padding {self.padding!r}")
        if self.upsample not in UPSAMPLES:
            raise ValueError(f"unknown upsample mode {self.upsample!r}")
        if self.in_features < 1 or self.out_features < 1:
            raise ValueError("feature counts must be positive")
        if self.kernel_width < 1 or self.kernel_width % 2 == 0:
            raise ValueError("kernel width must be an odd positive integer")
        if self.resample < 1:
            raise ValueError("resample factor must be >= 1")
        if self.kind == "hidden" and self.resample != 1:
            raise ValueError("hidden layers do not resample")
        if self.nonlinearity == "leaky_relu" and not 0.0 <= self.slope <= 1.0:
            # |slope| <= 1 keeps the activation 1-Lipschitz
            raise ValueError("leaky_relu slope must lie in [0, 1]")

    @property
    def stride(self) -> int:
        return self.resample

    def to_dict(self) -> dict:
        return asdict(self)


def desk_architecture(in_features: int = 20, out_features: int = 1, *,
                      padding: str = "zero_same", bias: bool = True,
                      upsample: str = "transposed") -> list[LayerSpec]:
    """Default small network: 2 encoders (K=5, F=16, M=2), 2 hidden (K=1, F=64), 2 decoders."""
    common = dict(padding=padding, bias=bias)
    return [
        LayerSpec("encoder", in_features, 16, 5, 2, **common),
        LayerSpec("encoder", 16, 16, 5, 2, **common),
        LayerSpec("hidden", 16, 64, 1, **common),
        LayerSpec("hidden", 64, 16, 1, **common),
        LayerSpec("decoder", 16, 16, 5, 2, upsample=upsample, **common),
        LayerSpec("decoder", 16, out_features, 5, 2, upsample=upsample, **common),
    ]


def paper_architecture(in_features: int = 20, out_features: int = 1) -> list[LayerSpec]:
    """3 encoders (K=9, F=128, M=2), 4 hidden (K=1, F=1024), 3 decoders."""
    layers = [LayerSpec("encoder", in_features, 128, 9, 2),
              LayerSpec("encoder", 128, 128, 9, 2),
              LayerSpec("encoder", 128, 128, 9, 2)]
    widths = [128, 1024, 1024, 1024, 128]
    for a, b in zip(widths[:-1], widths[1:]):
        layers.append(LayerSpec("hidden", a, b, 1))
    layers += [LayerSpec("decoder", 128, 128, 9, 2),
               LayerSpec("decoder", 128, 128, 9, 2),
               LayerSpec("decoder", 128, out_features, 9, 2)]
    return layers


@dataclass
class NetworkParams:
    specs: list[LayerSpec]
    weights: list[np.ndarray]
    biases: list[np.ndarray | None]

    def __post_init__(self):
        if not (len(self.specs) == len(self.weights) == len(self.biases)):
            raise ValueError("specs, weights and biases must have equal length")
        for i, (s, w, b) in enumerate(zip(self.specs, self.weights, self.biases)):
            if w.shape[:2] != (s.out_features, s.in_features):
                raise ValueError(f"layer {i}: filter shape {w.shape} does not match spec")
            if any(k != s.kernel_width for k in w.shape[2:]):
                raise ValueError(f"layer {i}: kernel shape {w.shape[2:]} does not match spec")
            if (b is None) == s.bias:
                raise ValueError(f"layer {i}: bias presence does not match spec")
            if i and s.in_features != self.specs[i - 1].out_features:
                raise ValueError(f"layer {i}: feature counts do not chain")

    @property
    def dim(self) -> int:
        return self.weights[0].ndim - 2 if self.weights else 1

    @property
    def dtype(self):
        return self.weights[0].dtype if self.weights else np.dtype(np.float64)

    @property
    def total_stride(self) -> int:
        """Product of encoder resample factors."""
        return math.prod(s.resample for s in self.specs if s.kind == "encoder")

    def tensors(self) -> list[np.ndarray]:
        """Trainable tensors in a fixed order: w0, [b0], w1, [b1], ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            if b is not None:
                out.append(b)
        return out

    def with_tensors(self, tensors: Sequence[np.ndarray]) -> "NetworkParams":
        it = iter(tensors)
        weights, biases = [], []
        for b in self.biases:
            weights.append(next(it))
            biases.append(next(it) if b is not None else None)
        return NetworkParams(list(self.specs), weights, biases)

    def astype(self, dtype) -> "NetworkParams":
        return self.with_tensors([t.astype(dtype) for t in self.tensors()])

    def copy(self) -> "NetworkParams":
        return self.with_tensors([t.copy() for t in self.tensors()])

    def flatten(self) -> np.ndarray:
        ts = self.tensors()
        if not ts:
            return np.zeros(0, dtype=self.dtype)
        return np.concatenate([t.ravel() for t in ts])

    def unflatten(self, flat: np.ndarray) -> "NetworkParams":
        out, pos = [], 0
        for t in self.tensors():
            out.append(np.asarray(flat[pos:pos + t.size], dtype=t.dtype).reshape(t.shape))
            pos += t.size
        if pos != flat.size:
            raise ValueError(f"expected {pos} values, got {flat.size}")
        return self.with_tensors(out)

    def receptive_footprint(self) -> int:
        """Sum over layers of kernel width times the finer grid spacing, in input pixels.

        This is the ``L*K`` term of the window bound for a resampling network:
        each layer widens the dependency cone by at most this many input
        pixels, so output pixels farther than half of it from the window edge
        never see the zero padding.
        """
        spacing, total = 1, 0
        for s in self.specs:
            if s.kind == "encoder":
                total += s.kernel_width * spacing
                spacing *= s.resample
            elif s.kind == "hidden":
                total += s.kernel_width * spacing
            else:
                spacing //= s.resample
                total += s.kernel_width * max(spacing, 1)
        return total


def init_network(arch: Sequence[LayerSpec], dim: int = 2, seed: int = 0,
                 dtype=np.float32) -> NetworkParams:
    """Uniform Glorot initialisation, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for s in arch:
        ksize = s.kernel_width ** dim
        limit = math.sqrt(6.0 / (s.in_features * ksize + s.out_features * ksize))
        shape = (s.out_features, s.in_features) + (s.kernel_width,) * dim
        weights.append(rng.uniform(-limit, limit, size=shape).astype(dtype))
        biases.append(np.zeros(s.out_features, dtype=dtype) if s.bias else None)
    return NetworkParams(list(arch), weights, biases)


# --------------------------------------------------------------------------
# convolution primitives

def _spatial_axes(d: int, start: int = 2) -> list[int]:
    return list(range(start, start + d))


def _pad(x: np.ndarray, p: int, d: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, [(0, 0), (0, 0)] + [(p, p)] * d)


def _windows(xp: np.ndarray, k: int, stride: int, d: int) -> np.ndarray:
    """(B, C, *S) -> (B, C, *S_out, *K) view of every stride-th k-wide patch."""
    win = sliding_window_view(xp, (k,) * d, axis=tuple(_spatial_axes(d)))
    if stride > 1:
        win = win[(slice(None), slice(None)) + (slice(None, None, stride),) * d]
    return win


def _scatter(col: np.ndarray, stride: int, out_spatial: Sequence[int]) -> np.ndarray:
    """Adjoint of _windows followed by a contraction.

    col is (C, *K, B, *S_in); returns (B, C, *out_spatial) where entry
    ``stride*i + k`` accumulates ``col[:, k, :, i]``.
    """
    d = len(out_spatial)
    c, k, b = col.shape[0], col.shape[1], col.shape[1 + d]
    s_in = col.shape[2 + d:]
    out = np.zeros((c, b) + tuple(out_spatial), dtype=col.dtype)
    for offs in itertools.product(range(k), repeat=d):
        sl = tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offs, s_in))
        out[(slice(None), slice(None)) + sl] += col[(slice(None),) + offs]
    return np.swapaxes(out, 0, 1)


def _check(x: np.ndarray, w: np.ndarray):
    if x.ndim != w.ndim:
        raise ValueError(f"input rank {x.ndim} does not match filter rank {w.ndim}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"input has {x.shape[1]} features, filter expects {w.shape[1]}")


def _patches(x: np.ndarray, k: int, stride: int, padding: str) -> tuple[np.ndarray, tuple]:
    """im2col: ``(B * prod(S_out), C * K^d)`` patch matrix and the output spatial shape."""
    d = x.ndim - 2
    p = k // 2 if padding == "zero_same" else 0
    xp = _pad(x, p, d)
    if any(n < k for n in xp.shape[2:]):
        raise ValueError(f"input {x.shape[2:]} is narrower than the kernel")
    win = _windows(xp, k, stride, d)
    s_out = win.shape[2:2 + d]
    perm = [0] + _spatial_axes(d) + [1] + _spatial_axes(d, 2 + d)
    cols = np.ascontiguousarray(win.transpose(perm)).reshape(-1, x.shape[1] * k ** d)
    return cols, s_out


def _contract(cols: np.ndarray, w: np.ndarray, b: int, s_out: tuple) -> np.ndarray:
    z = cols @ w.reshape(w.shape[0], -1).T
    return np.moveaxis(z.reshape((b,) + tuple(s_out) + (w.shape[0],)), -1, 1)


def conv_forward(x: np.ndarray, w: np.ndarray, stride: int = 1,
                 padding: str = "zero_same") -> np.ndarray:
    """Strided multi-channel correlation.

    Output size is ``ceil(S / stride)`` with zero_same padding and
    ``(S - K) // stride + 1`` with no padding.
    """
    _check(x, w)
    cols, s_out = _patches(x, w.shape[-1], stride, padding)
    return _contract(cols, w, x.shape[0], s_out)


def conv_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray, stride: int = 1,
                  padding: str = "zero_same", need_input_grad: bool = True,
                  cols: np.ndarray | None = None) -> tuple[np.ndarray | None, np.ndarray]:
    """Gradients of ``<g, conv_forward(x, w)>`` with respect to x and w.

    ``cols`` may carry the patch matrix already built by the forward pass.
    """
    d, k = w.ndim - 2, w.shape[-1]
    if cols is None:
        cols, _ = _patches(x, k, stride, padding)
    gm = np.moveaxis(g, 1, -1).reshape(-1, g.shape[1])
    gw = (gm.T @ cols).reshape(w.shape)
    if not need_input_grad:
        return None, gw
    p = k // 2 if padding == "zero_same" else 0
    padded = [n + 2 * p for n in x.shape[2:]]
    col = np.tensordot(w, g, axes=([0], [1]))
    gxp = _scatter(col, stride, padded)
    if p:
        gxp = gxp[(slice(None), slice(None)) + (slice(p, -p),) * d]
    return gxp, gw


def _transposed_geometry(s_in: Sequence[int], k: int, stride: int, padding: str):
    full = [(n - 1) * stride + k for n in s_in]
    if padding == "none":
        return full, full, 0
    p = (k - 1) // 2
    target = [n * stride for n in s_in]
    buf = [max(f, p + t) for f, t in zip(full, target)]
    return buf, target, p


def conv_transpose_forward(x: np.ndarray, w: np.ndarray, stride: int,
                           padding: str = "zero_same") -> np.ndarray:
    """Strided transposed correlation; ``w`` is (out, in, *K).

    With zero_same padding the output is exactly ``stride`` times the input
    size and input pixel i lands on output pixel ``stride*i``.
    """
    _check(x, w)
    k = w.shape[-1]
    buf, target, p = _transposed_geometry(x.shape[2:], k, stride, padding)
    col = np.tensordot(w, x, axes=([1], [1]))
    out = _scatter(col, stride, buf)
    return out[(slice(None), slice(None)) + tuple(slice(p, p + t) for t in target)]


def conv_transpose_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray, stride: int,
                            padding: str = "zero_same") -> tuple[np.ndarray, np.ndarray]:
    d, k = w.ndim - 2, w.shape[-1]
    buf, target, p = _transposed_geometry(x.shape[2:], k, stride, padding)
    gbuf = np.zeros(g.shape[:2] + tuple(buf), dtype=g.dtype)
    gbuf[(slice(None), slice(None)) + tuple(slice(p, p + t) for t in target)] = g
    win = _windows(gbuf, k, stride, d)
    win = win[(slice(None), slice(None)) + tuple(slice(0, n) for n in x.shape[2:])]
    gx = np.moveaxis(np.tensordot(win, w, axes=([1] + _spatial_axes(d, 2 + d),
                                                [0] + _spatial_axes(d))), -1, 1)
    sp = _spatial_axes(d)
    gw = np.tensordot(x, win, axes=([0] + sp, [0] + sp))
    return gx, np.swapaxes(gw, 0, 1)


def _upsample_nearest(x: np.ndarray, m: int, d: int) -> np.ndarray:
    for ax in _spatial_axes(d):
        x = np.repeat(x, m, axis=ax)
    return x


def _downsum(g: np.ndarray, m: int, d: int) -> np.ndarray:
    shape = list(g.shape[:2])
    for n in g.shape[2:]:
        shape += [n // m, m]
    g = g.reshape(shape)
    return g.sum(axis=tuple(range(3, 3 + 2 * d, 2)))


# --------------------------------------------------------------------------
# nonlinearities

def activation(spec: LayerSpec, z: np.ndarray) -> np.ndarray:
    if spec.nonlinearity == "identity":
        return z
    if spec.nonlinearity == "relu":
        return np.maximum(z, 0)
    if spec.nonlinearity == "tanh":
        return np.tanh(z)
    return np.where(z > 0, z, z * z.dtype.type(spec.slope))


def activation_grad(spec: LayerSpec, z: np.ndarray) -> np.ndarray:
    if spec.nonlinearity == "identity":
        return np.ones_like(z)
    if spec.nonlinearity == "relu":
        return (z > 0).astype(z.dtype)
    if spec.nonlinearity == "tanh":
        return 1 - np.tanh(z) ** 2
    return np.where(z > 0, z.dtype.type(1), z.dtype.type(spec.slope))


# --------------------------------------------------------------------------
# layers and networks

def _linear(spec: LayerSpec, w: np.ndarray, b: np.ndarray | None, x: np.ndarray):
    """Pre-activation of a layer, plus the patch matrix when one was built."""
    d = w.ndim - 2
    cols = None
    if spec.kind == "decoder" and spec.upsample == "transposed":
        z = conv_transpose_forward(x, w, spec.resample, spec.padding)
    else:
        stride = spec.resample if spec.kind == "encoder" else 1
        src = x
        if spec.kind == "decoder":
            src = _upsample_nearest(x, spec.resample, d)
        _check(src, w)
        cols, s_out = _patches(src, w.shape[-1], stride, spec.padding)
        z = _contract(cols, w, x.shape[0], s_out)
    if b is not None:
        z = z + b.reshape((1, -1) + (1,) * d)
    return z, cols


def _linear_backward(spec: LayerSpec, w: np.ndarray, x: np.ndarray, g: np.ndarray,
                     need_input_grad: bool = True, cols: np.ndarray | None = None):
    d = w.ndim - 2
    if spec.kind == "encoder":
        return conv_backward(x, w, g, spec.resample, spec.padding, need_input_grad, cols)
    if spec.kind == "hidden":
        return conv_backward(x, w, g, 1, spec.padding, need_input_grad, cols)
    if spec.upsample == "nearest":
        gu, gw = conv_backward(_upsample_nearest(x, spec.resample, d), w, g, 1,
                               spec.padding, need_input_grad, cols)
        return (None if gu is None else _downsum(gu, spec.resample, d)), gw
    return conv_transpose_backward(x, w, g, spec.resample, spec.padding)


def layer_forward(spec: LayerSpec, w: np.ndarray, b: np.ndarray | None,
                  x: np.ndarray) -> np.ndarray:
    """Convolution (with resampling for encoder/decoder) followed by the nonlinearity."""
    return activation(spec, _linear(spec, w, b, x)[0])


def _as_batch(params: NetworkParams, x) -> tuple[np.ndarray, bool]:
    d = params.dim
    if hasattr(x, "window"):
        data = np.asarray(x.data)
        x = data[None] if x.channels == 1 else data
    x = np.asarray(x)
    if x.ndim == d + 1:
        return x[None].astype(params.dtype, copy=False), True
    if x.ndim != d + 2:
        raise ValueError(f"expected input of rank {d + 1} or {d + 2}, got {x.ndim}")
    return x.astype(params.dtype, copy=False), False


def _check_divisible(params: NetworkParams, x: np.ndarray):
    m = params.total_stride
    if any(s.padding == "zero_same" for s in params.specs) and any(n % m for n in x.shape[2:]):
        raise ValueError(f"spatial size {x.shape[2:]} is not divisible by the total "
                         f"resample factor {m}")


def forward(params: NetworkParams, x):
    """Run the network on ``(B, F0, *S)`` or a single ``(F0, *S)`` stack.

    An :class:`~stlab.raster.IntensityImage` input gives an IntensityImage
    back on the same window; arrays give arrays.
    """
    xb, single = _as_batch(params, x)
    _check_divisible(params, xb)
    for s, w, b in zip(params.specs, params.weights, params.biases):
        xb = layer_forward(s, w, b, xb)
    out = xb[0] if single else xb
    if hasattr(x, "window"):
        from .raster import IntensityImage
        return IntensityImage(out[0] if out.shape[0] == 1 else out, x.window,
                              channels=out.shape[0])
    return out


def _forward_cached(params: NetworkParams, xb: np.ndarray):
    cache = []
    for s, w, b in zip(params.specs, params.weights, params.biases):
        z, cols = _linear(s, w, b, xb)
        cache.append((xb, z, cols))
        xb = activation(s, z)
    return xb, cache


def _backward_cached(params: NetworkParams, cache, g: np.ndarray) -> list[np.ndarray]:
    grads_w, grads_b = [None] * len(cache), [None] * len(cache)
    d = params.dim
    for i in range(len(cache) - 1, -1, -1):
        s, w = params.specs[i], params.weights[i]
        xin, z, cols = cache[i]
        gz = g * activation_grad(s, z)
        if params.biases[i] is not None:
            grads_b[i] = gz.sum(axis=(0,) + tuple(_spatial_axes(d)))
        g, grads_w[i] = _linear_backward(s, w, xin, gz, i > 0, cols)
    out = []
    for gw, gb in zip(grads_w, grads_b):
        out.append(gw)
        if gb is not None:
            out.append(gb)
    return out


def backward(params: NetworkParams, x, grad_output: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients of ``<grad_output, forward(params, x)>``.

    Returned in the order of :meth:`NetworkParams.tensors`.
    """
    xb, single = _as_batch(params, x)
    _check_divisible(params, xb)
    g = np.asarray(grad_output, dtype=params.dtype)
    if single:
        g = g[None]
    out, cache = _forward_cached(params, xb)
    if g.shape != out.shape:
        raise ValueError(f"gradient shape {g.shape} does not match output {out.shape}")
    return _backward_cached(params, cache, g)


def center_crop(a: np.ndarray, margin: int, d: int) -> np.ndarray:
    if margin <= 0:
        return a
    lead = (slice(None),) * (a.ndim - d)
    return a[lead + (slice(margin, -margin),) * d]


def mse_and_grad(params: NetworkParams, x: np.ndarray, y: np.ndarray,
                 margin: int = 0) -> tuple[float, list[np.ndarray]]:
    """Mean squared error per output pixel on the centre crop, and its gradient."""
    out, cache = _forward_cached(params, x)
    d = params.dim
    diff = center_crop(out, margin, d) - center_crop(y.astype(out.dtype, copy=False), margin, d)
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    g = np.zeros_like(out)
    lead = (slice(None),) * 2
    inner = lead + ((slice(margin, -margin),) * d if margin > 0 else ())
    g[inner] = diff * out.dtype.type(2.0 / diff.size)
    return loss, _backward_cached(params, cache, g)


# --------------------------------------------------------------------------
# optimisation

@dataclass
class AdamWState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, tensors: Sequence[np.ndarray]) -> "AdamWState":
        return cls(0, [np.zeros_like(t) for t in tensors], [np.zeros_like(t) for t in tensors])


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_margin: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


PAPER_TRAIN = dict(epochs=84, batch_size=32, learning_rate=6.112e-6, weight_decay=0.07490)


def adamw_step(params: NetworkParams, grads: Sequence[np.ndarray], state: AdamWState,
               config: TrainConfig) -> tuple[NetworkParams, AdamWState]:
    """One AdamW update; the decay shrinks weights directly by ``lr * weight_decay``."""
    tensors = params.tensors()
    if len(grads) != len(tensors) or len(state.m) != len(tensors):
        raise ValueError("gradient / optimiser state does not match parameters")
    t = state.step + 1
    b1, b2, lr = config.beta1, config.beta2, config.learning_rate
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new_t, new_m, new_v = [], [], []
    for p, g, m, v in zip(tensors, grads, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + config.eps)
        new_t.append((p * (1 - lr * config.weight_decay) - lr * step).astype(p.dtype))
        new_m.append(m.astype(p.dtype))
        new_v.append(v.astype(p.dtype))
    return params.with_tensors(new_t), AdamWState(t, new_m, new_v)


class ArrayDataset:
    """Paired arrays ``x: (n, F0, *S)`` and ``y: (n, FL, *S)``."""

    def __init__(self, x: np.ndarray, y: np.ndarray):
        if len(x) != len(y):
            raise ValueError("input and target counts differ")
        self.x, self.y = x, y

    def __len__(self):
        return len(self.x)

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self.x[idx], self.y[idx]


def _as_dataset(dataset):
    if isinstance(dataset, tuple):
        return ArrayDataset(*dataset)
    return dataset


def evaluate_loss(params: NetworkParams, dataset, batch_size: int = 8, margin: int = 0) -> float:
    """Mean per-pixel MSE of the network over a dataset (fixed order)."""
    ds = _as_dataset(dataset)
    total, count = 0.0, 0
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        x, y = ds.batch(idx)
        out = forward(params, x.astype(params.dtype, copy=False))
        diff = center_crop(out, margin, params.dim) - center_crop(y, margin, params.dim)
        total += float(np.sum(np.square(diff, dtype=np.float64)))
        count += diff.size
    return total / count


def train(dataset, arch: Sequence[LayerSpec] | NetworkParams, config: TrainConfig,
          dim: int = 2, dtype=np.float32,
          callback: Callable[[int, float], None] | None = None
          ) -> tuple[NetworkParams, list[float]]:
    """Minimise the windowed per-pixel MSE with AdamW.

    Shuffling and initialisation are drawn from ``config.seed`` so a run is
    reproducible.  Returns the trained parameters and the mean training loss
    of every epoch.
    """
    ds = _as_dataset(dataset)
    if len(ds) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    if isinstance(arch, NetworkParams):
        params = arch.astype(dtype)
    else:
        params = init_network(arch, dim=dim, seed=int(rng.integers(2 ** 31)), dtype=dtype)
    state = AdamWState.zeros_like(params.tensors())
    history: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(ds))
        losses, weights = [], []
        for start in range(0, len(ds), config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            x, y = ds.batch(idx)
            loss, grads = mse_and_grad(params, x.astype(dtype, copy=False),
                                       y.astype(dtype, copy=False), config.loss_margin)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            params, state = adamw_step(params, grads, state, config)
            losses.append(loss)
            weights.append(len(idx))
        history.append(float(np.average(losses, weights=weights)))
        if callback is not None:
            callback(epoch, history[-1])
    return params, history


def filter_l1_product(params: NetworkParams, rule: str = "max_row") -> float:
    """Product over layers of each filter bank's L1 gain.

    With per-pair L1 norms ``a[o, i] = sum |h[o, i, :]|`` the ``max_row``
    gain is ``max_o sum_i a``.  The ``schur`` gain
    ``sqrt(max_o sum_i a * max_i sum_o a)`` also bounds the l2 operator norm
    of a multi-channel convolution, so the bound and lemma checks use it.
    Both reduce to ``||h||_1`` for a single channel.  Nearest-neighbour
    upsampling adds a factor ``sqrt(M^d)`` under ``schur``.
    """
    if rule not in ("max_row", "schur"):
        raise ValueError(f"unknown rule {rule!r}")
    h = 1.0
    for s, w in zip(params.specs, params.weights):
        d = w.ndim - 2
        a = np.abs(w.astype(np.float64)).sum(axis=tuple(range(2, 2 + d)))
        if rule == "max_row":
            h *= a.sum(axis=1).max()
            continue
        gain = math.sqrt(a.sum(axis=1).max() * a.sum(axis=0).max())
        if s.kind == "decoder" and s.upsample == "nearest":
            gain *= math.sqrt(s.resample ** d)
        h *= gain
    return h
