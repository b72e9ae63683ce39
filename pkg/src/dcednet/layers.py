"""Layer primitives with forward caches and analytic backward passes.

Every forward function returns ``(output, cache)``. Pass the cache, exactly
once, to :func:`layer_backward` together with the gradient of the loss with
respect to the output.

Conventions:

* ``conv2d`` is a cross-correlation (no kernel flip), stride 1, zero padding 1.
* ``transpose_conv2d`` scatters each input element, scaled by the 3x3 kernel,
  onto a stride-2 grid and crops one leading row/column, so the output is
  exactly twice the input size. Weights are ``(c_out, c_in, 3, 3)`` for both.
* Batchnorm keeps ``running = momentum * running + (1 - momentum) * batch``.
* Dropout is inverted: survivors are scaled by ``1 / (1 - rate)`` during
  training and inference is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import special

from .tensor import ShapeError, check_tensor

KERNEL = 3


class CacheError(RuntimeError):
    """Raised when a layer cache is reused or passed to the wrong backward."""


@dataclass
class ConvParams:
    weight: np.ndarray  # (c_out, c_in, 3, 3)
    bias: np.ndarray    # (c_out,)

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2:] != (KERNEL, KERNEL):
            raise ShapeError(f"conv weight must be (c_out, c_in, 3, 3), got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match c_out={self.weight.shape[0]}")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.9,
               eps: float = 1e-5) -> "BatchNormParams":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), momentum, eps)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class DropoutSpec:
    rate: float = 0.0
    training: bool = False

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")


@dataclass
class LayerCache:
    kind: str
    data: dict[str, Any] = field(default_factory=dict)
    consumed: bool = False


def _check_mode(mode: str) -> bool:
    if mode not in ("training", "inference"):
        raise ValueError(f"mode must be 'training' or 'inference', got {mode!r}")
    return mode == "training"


# -- convolution --------------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, KERNEL * KERNEL, h, w), dtype=x.dtype)
    for i in range(KERNEL):
        for j in range(KERNEL):
            cols[:, :, i * KERNEL + j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(n, c * KERNEL * KERNEL, h * w)


def _col2im(cols: np.ndarray, shape) -> np.ndarray:
    n, c, h, w = shape
    cols = cols.reshape(n, c, KERNEL * KERNEL, h, w)
    xp = np.zeros((n, c, h + 2, w + 2), dtype=cols.dtype)
    for i in range(KERNEL):
        for j in range(KERNEL):
            xp[:, :, i:i + h, j:j + w] += cols[:, :, i * KERNEL + j]
    return xp[:, :, 1:-1, 1:-1]


def conv2d(x: np.ndarray, params: ConvParams):
    check_tensor(x, "conv2d input")
    n, c, h, w = x.shape
    if c != params.c_in:
        raise ShapeError(f"conv2d expects {params.c_in} input channels, got {c}")
    cols = _im2col(x)
    wmat = params.weight.reshape(params.c_out, -1)
    out = np.matmul(wmat, cols).reshape(n, params.c_out, h, w)
    out += params.bias[None, :, None, None]
    return out, LayerCache("conv", {"cols": cols, "shape": x.shape, "params": params})


def _conv2d_backward(data, g):
    params = data["params"]
    n, c, h, w = data["shape"]
    gmat = g.reshape(n, params.c_out, h * w)
    wmat = params.weight.reshape(params.c_out, -1)
    dweight = np.einsum("nok,nck->oc", gmat, data["cols"]).reshape(params.weight.shape)
    dbias = g.sum(axis=(0, 2, 3))
    dx = _col2im(np.matmul(wmat.T, gmat), data["shape"])
    return dx, {"weight": dweight, "bias": dbias}


def transpose_conv2d(x: np.ndarray, params: ConvParams, stride: int = 2):
    check_tensor(x, "transpose_conv2d input")
    if stride != 2:
        raise ValueError("only stride 2 transpose convolution is supported")
    n, c, h, w = x.shape
    if c != params.c_in:
        raise ShapeError(f"transpose_conv2d expects {params.c_in} input channels, got {c}")
    o = params.c_out
    # (o, 3, 3, c) -> rows indexed by (o, i, j)
    wmat = params.weight.transpose(0, 2, 3, 1).reshape(o * KERNEL * KERNEL, c)
    z = np.matmul(wmat, x.reshape(n, c, h * w)).reshape(n, o, KERNEL, KERNEL, h, w)
    full = np.zeros((n, o, 2 * h + 1, 2 * w + 1), dtype=z.dtype)
    for i in range(KERNEL):
        for j in range(KERNEL):
            full[:, :, i:i + 2 * h:2, j:j + 2 * w:2] += z[:, :, i, j]
    out = full[:, :, 1:, 1:] + params.bias[None, :, None, None]
    return out, LayerCache("tconv", {"x": x, "params": params})


def _tconv_backward(data, g):
    x, params = data["x"], data["params"]
    n, c, h, w = x.shape
    o = params.c_out
    gfull = np.zeros((n, o, 2 * h + 1, 2 * w + 1), dtype=g.dtype)
    gfull[:, :, 1:, 1:] = g
    gz = np.empty((n, o, KERNEL, KERNEL, h, w), dtype=g.dtype)
    for i in range(KERNEL):
        for j in range(KERNEL):
            gz[:, :, i, j] = gfull[:, :, i:i + 2 * h:2, j:j + 2 * w:2]
    gz = gz.reshape(n, o * KERNEL * KERNEL, h * w)
    wmat = params.weight.transpose(0, 2, 3, 1).reshape(o * KERNEL * KERNEL, c)
    dx = np.matmul(wmat.T, gz).reshape(x.shape)
    dwmat = np.einsum("nrk,nck->rc", gz, x.reshape(n, c, h * w))
    dweight = dwmat.reshape(o, KERNEL, KERNEL, c).transpose(0, 3, 1, 2)
    dbias = g.sum(axis=(0, 2, 3))
    return dx, {"weight": np.ascontiguousarray(dweight), "bias": dbias}


# -- normalization ------------------------------------------------------------

def batchnorm(x: np.ndarray, params: BatchNormParams, mode: str = "training"):
    check_tensor(x, "batchnorm input")
    if x.shape[1] != params.channels:
        raise ShapeError(f"batchnorm has {params.channels} channels, input has {x.shape[1]}")
    training = _check_mode(mode)
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        mom = params.momentum
        params.running_mean[...] = mom * params.running_mean + (1 - mom) * mean
        params.running_var[...] = mom * params.running_var + (1 - mom) * unbiased
    else:
        mean, var = params.running_mean, params.running_var
    inv_std = 1.0 / np.sqrt(var + params.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = params.gamma[None, :, None, None] * xhat + params.beta[None, :, None, None]
    return out, LayerCache("batchnorm", {"xhat": xhat, "inv_std": inv_std,
                                         "params": params, "training": training})


def _batchnorm_backward(data, g):
    xhat, inv_std, params = data["xhat"], data["inv_std"], data["params"]
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    scale = (params.gamma * inv_std)[None, :, None, None]
    if not data["training"]:
        return g * scale, {"gamma": dgamma, "beta": dbeta}
    m = g.shape[0] * g.shape[2] * g.shape[3]
    dx = scale * (g - (dbeta / m)[None, :, None, None]
                  - xhat * (dgamma / m)[None, :, None, None])
    return dx, {"gamma": dgamma, "beta": dbeta}


# -- pooling, dropout, activations --------------------------------------------

def pool2x2(x: np.ndarray, mode: str = "average"):
    check_tensor(x, "pool input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pool2x2 needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2)
    if mode == "average":
        return blocks.mean(axis=(3, 5)), LayerCache("pool", {"mode": mode, "shape": x.shape})
    if mode == "max":
        flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, LayerCache("pool", {"mode": mode, "shape": x.shape, "argmax": arg})
    raise ValueError(f"unknown pool mode {mode!r}")


def _pool_backward(data, g):
    n, c, h, w = data["shape"]
    if data["mode"] == "average":
        dx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return dx.astype(g.dtype, copy=False), None
    flat = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
    np.put_along_axis(flat, data["argmax"][..., None], g[..., None], axis=-1)
    dx = flat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dx.reshape(n, c, h, w), None


def dropout(x: np.ndarray, spec: DropoutSpec, rng: np.random.Generator | None = None):
    if not spec.training or spec.rate == 0.0:
        return x, LayerCache("dropout", {"mask": None})
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = rng.random(x.shape) >= spec.rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - spec.rate)
    return x * mask, LayerCache("dropout", {"mask": mask})


def _dropout_backward(data, g):
    mask = data["mask"]
    return (g if mask is None else g * mask), None


def relu(x: np.ndarray):
    positive = x > 0
    return np.where(positive, x, x.dtype.type(0)), LayerCache("relu", {"positive": positive})


def _relu_backward(data, g):
    return np.where(data["positive"], g, g.dtype.type(0)), None


def sigmoid(x: np.ndarray):
    out = special.expit(x).astype(x.dtype, copy=False)
    return out, LayerCache("sigmoid", {"out": out})


def _sigmoid_backward(data, g):
    out = data["out"]
    return g * out * (1 - out), None


_BACKWARD = {
    "conv": _conv2d_backward,
    "tconv": _tconv_backward,
    "batchnorm": _batchnorm_backward,
    "pool": _pool_backward,
    "dropout": _dropout_backward,
    "relu": _relu_backward,
    "sigmoid": _sigmoid_backward,
}

LAYER_KINDS = tuple(_BACKWARD)

_OUTPUT_SHAPE = {
    "conv": lambda d: (d["shape"][0], d["params"].c_out) + tuple(d["shape"][2:]),
    "tconv": lambda d: (d["x"].shape[0], d["params"].c_out,
                        2 * d["x"].shape[2], 2 * d["x"].shape[3]),
    "batchnorm": lambda d: d["xhat"].shape,
    "pool": lambda d: (d["shape"][0], d["shape"][1], d["shape"][2] // 2, d["shape"][3] // 2),
    "relu": lambda d: d["positive"].shape,
    "sigmoid": lambda d: d["out"].shape,
}


def layer_backward(kind: str, cache: LayerCache, grad_out: np.ndarray):
    """Vector-Jacobian product of the forward op that produced ``cache``.

    Returns ``(grad_in, param_grads)``; ``param_grads`` is a dict keyed by
    parameter field name for conv, transpose conv and batchnorm, else None.
    """
    if cache.kind != kind:
        raise CacheError(f"cache from a {cache.kind!r} layer passed to {kind!r} backward")
    if cache.consumed:
        raise CacheError(f"{kind} cache already consumed by a backward call")
    expected = _OUTPUT_SHAPE.get(kind)
    if expected is not None and tuple(grad_out.shape) != tuple(expected(cache.data)):
        raise ShapeError(f"{kind} backward: grad shape {grad_out.shape} != output shape "
                         f"{tuple(expected(cache.data))}")
    cache.consumed = True
    grad_in, pgrads = _BACKWARD[kind](cache.data, grad_out)
    cache.data = {}
    return grad_in, pgrads
