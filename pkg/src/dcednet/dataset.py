"""Manifest files and on-disk dataset loading."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import atomic_write_bytes, read_image
from .preprocess import LabeledImage, to_network_input, unity_mask

MANIFEST = "manifest.csv"
MORPHOLOGY_COLUMNS = ("normal", "microcyte", "macrocyte", "elliptocyte", "target")
HEADER = ("name", "image", "mask", "seed", "tag") + MORPHOLOGY_COLUMNS


@dataclass
class ManifestRow:
    name: str
    image: str
    mask: str
    seed: int
    tag: str
    counts: dict[str, int] = field(default_factory=dict)


def write_manifest(path, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADER)
    for r in rows:
        writer.writerow([r.name, r.image, r.mask, r.seed, r.tag] +
                        [r.counts.get(m, 0) for m in MORPHOLOGY_COLUMNS])
    atomic_write_bytes(path, buf.getvalue().encode())


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: manifest lacks columns {sorted(missing)}")
        return [ManifestRow(row["name"], row["image"], row["mask"], int(row["seed"]), row["tag"],
                            {m: int(row[m]) for m in MORPHOLOGY_COLUMNS})
                for row in reader]


def load_preprocessed(directory) -> list[LabeledImage]:
    """Load a preprocessed dataset (8-bit gray images + unity-mask PGMs)."""
    directory = Path(directory)
    samples = []
    for row in read_manifest(directory / MANIFEST):
        gray = read_image(directory / row.image)
        mask = unity_mask(read_image(directory / row.mask))
        samples.append(LabeledImage(to_network_input(gray), mask, row.tag, row.counts, row.name))
    return samples


def stack(samples) -> tuple[np.ndarray, np.ndarray]:
    """Batch images ``(N, 3, S, S)`` and masks ``(N, 1, S, S)`` as float32."""
    x = np.concatenate([s.image for s in samples], axis=0)
    y = np.stack([s.mask for s in samples])[:, None].astype(np.float32)
    return x, y
