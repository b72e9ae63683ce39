"""Synthetic blood-smear scenes with exact ground-truth masks.

Cells are filled, rotated ellipses rasterized at pixel centres, so the mask
is the exact union of the cell supports. Target cells get a brighter inner
disc inside a darker ring. The background carries a linear illumination
ramp; Gaussian pixel noise is added last and never touches the mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataset
from .imageio import write_image
from .preprocess import render_mask
from .tensor import make_rng

MORPHOLOGIES = ("normal", "microcyte", "macrocyte", "elliptocyte", "target")

# radius bands as fractions of the image side
RADIUS_BANDS = {
    "normal": (0.070, 0.085),
    "microcyte": (0.045, 0.060),
    "macrocyte": (0.100, 0.120),
    "elliptocyte": (0.085, 0.105),  # major semi-axis
    "target": (0.070, 0.085),
}
ELLIPTOCYTE_ASPECT = (2.0, 2.6)
TARGET_INNER_RATIO = 0.45

PRESETS = {
    "healthy": (0.90, 0.025, 0.025, 0.025, 0.025),
    "anaemic": (0.20, 0.25, 0.15, 0.20, 0.20),
}


@dataclass
class CellSpec:
    morphology: str
    center: tuple[float, float]   # (x, y) in pixels
    radii: tuple[float, float]    # (a, b) semi-axes, a >= b
    rotation: float               # radians
    intensity: float              # gray level of the cell body
    inner_intensity: float | None = None  # target cells only
    inner_ratio: float = TARGET_INNER_RATIO


@dataclass
class SceneConfig:
    size: int = 128
    cells_per_image: int = 12
    weights: tuple[float, ...] = PRESETS["healthy"]
    overlap: float = 0.3
    gradient: float = 20.0
    noise_std: float = 4.0
    background: float = 225.0
    cell_intensity: float = 140.0
    seed: int = 0
    tag: str = "healthy"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(MORPHOLOGIES),):
            raise ValueError(f"need {len(MORPHOLOGIES)} morphology weights, got {self.weights}")
        if (w < 0).any() or w.sum() <= 0:
            raise ValueError(f"morphology weights must be non-negative with a positive sum: {self.weights}")
        if self.size < 8:
            raise ValueError(f"image size must be at least 8, got {self.size}")
        if self.cells_per_image < 0:
            raise ValueError("cells_per_image must be non-negative")

    @classmethod
    def preset(cls, tag: str, **overrides) -> "SceneConfig":
        if tag not in PRESETS:
            raise ValueError(f"unknown preset {tag!r}; choose from {sorted(PRESETS)}")
        return cls(**{"weights": PRESETS[tag], "tag": tag, **overrides})


def sample_cell(rng: np.random.Generator, config: SceneConfig) -> CellSpec:
    w = np.asarray(config.weights, dtype=np.float64)
    kind = MORPHOLOGIES[int(rng.choice(len(MORPHOLOGIES), p=w / w.sum()))]
    s = config.size
    cx, cy = rng.uniform(0.05 * s, 0.95 * s, size=2)
    lo, hi = RADIUS_BANDS[kind]
    a = rng.uniform(lo, hi) * s
    if kind == "elliptocyte":
        b = a / rng.uniform(*ELLIPTOCYTE_ASPECT)
    else:
        # slight eccentricity so round cells are not perfect discs
        b = a * rng.uniform(0.9, 1.0)
    rotation = rng.uniform(0.0, np.pi)
    intensity = config.cell_intensity + rng.uniform(-10.0, 10.0)
    inner = None
    if kind == "target":
        inner = intensity + 0.6 * (config.background - intensity)
    return CellSpec(kind, (float(cx), float(cy)), (float(a), float(b)), float(rotation),
                    float(intensity), inner)


def _ellipse_support(cell: CellSpec, shape, scale: float = 1.0) -> np.ndarray:
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs + 0.5 - cell.center[0], ys + 0.5 - cell.center[1]
    c, s = np.cos(cell.rotation), np.sin(cell.rotation)
    u, v = c * dx + s * dy, -s * dx + c * dy
    a, b = cell.radii[0] * scale, cell.radii[1] * scale
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _place(rng, config, placed):
    """Sample a cell, resampling its position while it overlaps too much."""
    cell = sample_cell(rng, config)
    for _ in range(30):
        ok = all(np.hypot(cell.center[0] - o.center[0], cell.center[1] - o.center[1])
                 >= (1.0 - config.overlap) * (cell.radii[0] + o.radii[0]) for o in placed)
        if ok:
            break
        cx, cy = rng.uniform(0.05 * config.size, 0.95 * config.size, size=2)
        cell.center = (float(cx), float(cy))
    return cell


def render_scene(rng: np.random.Generator, config: SceneConfig):
    """Returns ``(rgb uint8 image, mask uint8 with 0 = cell, counts per morphology)``."""
    shape = (config.size, config.size)
    cells = []
    for _ in range(config.cells_per_image):
        cells.append(_place(rng, config, cells))

    phi = rng.uniform(0.0, 2 * np.pi)
    ys, xs = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    ramp = ((xs - shape[1] / 2) * np.cos(phi) + (ys - shape[0] / 2) * np.sin(phi)) / (config.size / 2)
    gray = config.background + config.gradient * np.clip(ramp, -1.0, 1.0)
    # darkening relative to the background, so the ramp modulates cells too
    depth = np.zeros(shape)
    mask = np.ones(shape, dtype=np.uint8)
    counts = {m: 0 for m in MORPHOLOGIES}
    for cell in cells:
        support = _ellipse_support(cell, shape)
        d = np.full(shape, config.background - cell.intensity)
        if cell.inner_intensity is not None:
            inner = _ellipse_support(cell, shape, cell.inner_ratio)
            d[inner] = config.background - cell.inner_intensity
        depth[support] = np.maximum(depth[support], d[support])
        mask[support] = 0
        counts[cell.morphology] += 1

    tint = np.array([0.6, 1.2, 0.9])  # cells read pinkish: green darkens most
    rgb = gray[..., None] - depth[..., None] * tint
    if config.noise_std > 0:
        rgb = rgb + rng.standard_normal(rgb.shape) * config.noise_std
    image = np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8)
    return image, mask, counts


def image_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def generate_dataset(config: SceneConfig, n_images: int, out_dir) -> list[dataset.ManifestRow]:
    """Write ``n_images`` image/mask pairs plus ``manifest.csv`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_images):
        seed = image_seed(config.seed, i)
        image, mask, counts = render_scene(make_rng(seed), config)
        name = f"img_{i:04d}"
        img_rel, mask_rel = f"images/{name}.ppm", f"masks/{name}.pgm"
        write_image(out / img_rel, image)
        write_image(out / mask_rel, render_mask(mask))
        rows.append(dataset.ManifestRow(name, img_rel, mask_rel, seed, config.tag, counts))
    dataset.write_manifest(out / dataset.MANIFEST, rows)
    return rows
