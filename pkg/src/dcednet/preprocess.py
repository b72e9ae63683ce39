"""Image preparation: grayscale, Wiener denoise, Laplacian sharpen, contrast
stretch, resize, and unity-mask generation.

Raw images are ``uint8`` arrays of shape ``(h, w)`` or ``(h, w, 3)``. Every
stage maps 8-bit input to 8-bit output (rounded, clamped to [0, 255]).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .tensor import DTYPE

LAPLACIAN = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)
LUMA = np.array([0.299, 0.587, 0.114])


class IngestError(ValueError):
    """Raised when an image/mask pair cannot be turned into a sample."""


@dataclass
class PreprocessConfig:
    size: int = 320
    wiener_window: int = 5
    low_percentile: float = 1.0
    high_percentile: float = 99.0
    mask_threshold: int = 128


@dataclass
class LabeledImage:
    image: np.ndarray          # (1, 3, S, S) float32 in [0, 1]
    mask: np.ndarray           # (S, S) uint8, 0 = ROI, 1 = background
    tag: str = "unknown"
    class_counts: dict[str, int] = field(default_factory=dict)
    name: str = ""


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 2:
        return img.astype(np.uint8, copy=True)
    if img.ndim == 3 and img.shape[2] == 3:
        return _to_u8(img.astype(np.float64) @ LUMA)
    if img.ndim == 3 and img.shape[2] == 1:
        return img[:, :, 0].astype(np.uint8, copy=True)
    raise IngestError(f"unsupported channel layout {img.shape}; expected 1 or 3 channels")


def wiener_filter(img: np.ndarray, window: int = 5) -> np.ndarray:
    """Adaptive local Wiener filter with edge-replicated borders.

    The noise power is the mean of all local variances.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    x = np.asarray(img, dtype=np.float64)
    mean = ndimage.uniform_filter(x, window, mode="nearest")
    mean_sq = ndimage.uniform_filter(x * x, window, mode="nearest")
    var = np.maximum(mean_sq - mean * mean, 0.0)
    noise = var.mean()
    denom = np.maximum(var, noise)
    gain = np.divide(np.maximum(var - noise, 0.0), denom,
                     out=np.zeros_like(var), where=denom > 0)
    return _to_u8(mean + gain * (x - mean))


def laplacian_sharpen(img: np.ndarray) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64)
    lap = ndimage.correlate(x, LAPLACIAN, mode="nearest")
    return _to_u8(x - lap)


def contrast_normalize(img: np.ndarray, low: float = 1.0, high: float = 99.0) -> np.ndarray:
    """Stretch the [low, high] percentile range linearly onto [0, 255]."""
    x = np.asarray(img, dtype=np.float64)
    p_lo, p_hi = np.percentile(x, [low, high])
    if p_hi <= p_lo:
        return np.asarray(img, dtype=np.uint8).copy()
    return _to_u8((x - p_lo) * (255.0 / (p_hi - p_lo)))


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    # corner-aligned: first and last samples land exactly on the source corners
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def resize_bilinear(img: np.ndarray, size) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-D image to ``size`` (int or (h, w)).

    Returns float64; callers round as needed.
    """
    th, tw = (size, size) if np.isscalar(size) else size
    x = np.asarray(img, dtype=np.float64)
    if x.shape == (th, tw):
        return x.copy()
    ys, xs = _axis_coords(x.shape[0], th), _axis_coords(x.shape[1], tw)
    y0 = np.minimum(np.floor(ys).astype(int), x.shape[0] - 1)
    x0 = np.minimum(np.floor(xs).astype(int), x.shape[1] - 1)
    y1, x1 = np.minimum(y0 + 1, x.shape[0] - 1), np.minimum(x0 + 1, x.shape[1] - 1)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    top = x[y0][:, x0] * (1 - fx) + x[y0][:, x1] * fx
    bottom = x[y1][:, x0] * (1 - fx) + x[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def resize_nearest(img: np.ndarray, size) -> np.ndarray:
    th, tw = (size, size) if np.isscalar(size) else size
    x = np.asarray(img)
    ys = np.floor(_axis_coords(x.shape[0], th) + 0.5).astype(int)
    xs = np.floor(_axis_coords(x.shape[1], tw) + 0.5).astype(int)
    return x[ys][:, xs].copy()


def unity_mask(truth: np.ndarray, threshold: int = 128) -> np.ndarray:
    """0 where the truth image is darker than ``threshold`` (ROI), else 1."""
    truth = np.asarray(truth)
    if truth.ndim != 2:
        raise IngestError(f"truth image must be single channel, got shape {truth.shape}")
    return (truth >= threshold).astype(np.uint8)


def render_mask(mask: np.ndarray) -> np.ndarray:
    """8-bit rendering of a unity mask: 0 = ROI, 255 = background."""
    return (np.asarray(mask, dtype=np.uint8) * 255).astype(np.uint8)


def to_network_input(gray: np.ndarray) -> np.ndarray:
    """Replicate an 8-bit gray image into a (1, 3, S, S) tensor in [0, 1]."""
    x = np.asarray(gray, dtype=DTYPE) / DTYPE(255.0)
    return np.ascontiguousarray(np.broadcast_to(x, (1, 3) + x.shape))


def preprocess_gray(raw: np.ndarray, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Image path of the pipeline, ending in an S x S 8-bit image."""
    raw = np.asarray(raw)
    if min(raw.shape[:2]) < 8:
        raise IngestError(f"images must be at least 8x8, got {raw.shape[:2]}")
    g = to_grayscale(raw)
    g = wiener_filter(g, config.wiener_window)
    g = laplacian_sharpen(g)
    g = contrast_normalize(g, config.low_percentile, config.high_percentile)
    return _to_u8(resize_bilinear(g, config.size))


def preprocess_mask(truth: np.ndarray, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    return resize_nearest(unity_mask(to_grayscale(truth), config.mask_threshold), config.size)


def preprocess_pipeline(raw: np.ndarray, truth: np.ndarray,
                        config: PreprocessConfig = PreprocessConfig(),
                        tag: str = "unknown", class_counts=None, name: str = "") -> LabeledImage:
    raw, truth = np.asarray(raw), np.asarray(truth)
    if raw.shape[:2] != truth.shape[:2]:
        raise IngestError(f"image {raw.shape[:2]} and mask {truth.shape[:2]} sizes differ")
    gray = preprocess_gray(raw, config)
    return LabeledImage(to_network_input(gray), preprocess_mask(truth, config), tag,
                        dict(class_counts or {}), name)
