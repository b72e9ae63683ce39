"""Dense 4-D tensors and seeded random streams.

Tensors are plain ``numpy.ndarray`` objects of shape ``(n, c, h, w)`` stored
row-major as float32. The helpers here validate that contract; every layer
accepts any floating dtype so gradient checks can run in float64.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

DTYPE = np.float32
RNG_ALGORITHM = "numpy-PCG64"


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


class OracleError(RuntimeError):
    """Raised when a finite-difference oracle meets a non-finite value."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 stream; the algorithm name is recorded in checkpoints."""
    return np.random.Generator(np.random.PCG64(seed))


def check_shape(shape) -> tuple[int, int, int, int]:
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4:
        raise ShapeError(f"expected a 4-tuple shape, got {shape}")
    if any(d < 1 for d in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    return shape


def check_tensor(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")
    check_shape(x.shape)
    return x


def tensor_filled(shape, value: float, dtype=DTYPE) -> np.ndarray:
    return np.full(check_shape(shape), value, dtype=dtype)


def randn(rng: np.random.Generator, shape, std: float, dtype=DTYPE) -> np.ndarray:
    """Normal(0, std**2) samples drawn from ``rng``."""
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    shape = check_shape(shape)
    return (rng.standard_normal(shape) * std).astype(dtype)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack ``b``'s channels after ``a``'s."""
    check_tensor(a, "a")
    check_tensor(b, "b")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"cannot concat {a.shape} with {b.shape}: batch/spatial mismatch")
    return np.concatenate([a, b], axis=1)


def flat_offset(shape, index) -> int:
    n, c, h, w = shape
    i, j, y, x = index
    return ((i * c + j) * h + y) * w + x


def unravel_offset(shape, offset: int) -> tuple[int, int, int, int]:
    n, c, h, w = shape
    offset, x = divmod(offset, w)
    offset, y = divmod(offset, h)
    i, j = divmod(offset, c)
    return i, j, y, x


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                           h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, in float64.

    ``f`` is called with a float64 copy of ``x`` perturbed one element at a
    time.
    """
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite function value at element {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
