"""Bit-exact binary checkpoints.

Layout (all integers and floats little-endian)::

    b"DCED"  u32 version
    str rng_algorithm  str config_hash  str config_text
    u32 base_size  f64 final_threshold  u64 seed
    u32 width_count  u32 widths[width_count]
    u32 level_count
    per level:  u32 input_channels  f64 threshold  u32 block_count
        per block:  str kind  u32 ndim  u32 dims[ndim]  f32 data[prod(dims)]

``str`` is a u32 byte length followed by UTF-8 bytes. Blocks cover every
trainable array and the batchnorm running statistics, in ``Level.state()``
order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageio import atomic_write_bytes
from .network import MultiLevelNet, build_level
from .tensor import RNG_ALGORITHM, make_rng

MAGIC = b"DCED"
VERSION = 1


class CheckpointError(ValueError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class CheckpointHeader:
    version: int
    rng_algorithm: str
    config_hash: str
    config_text: str
    base_size: int
    final_threshold: float
    seed: int
    widths: tuple[int, ...]
    level_count: int


def _str(s: str) -> bytes:
    b = s.encode()
    return struct.pack("<I", len(b)) + b


def encode_checkpoint(net: MultiLevelNet, config_text: str = "") -> bytes:
    widths = net.levels[0].widths
    parts = [MAGIC, struct.pack("<I", VERSION), _str(RNG_ALGORITHM), _str(net.config_hash),
             _str(config_text), struct.pack("<IdQ", net.base_size, net.final_threshold, net.seed),
             struct.pack("<I", len(widths)), struct.pack(f"<{len(widths)}I", *widths),
             struct.pack("<I", len(net.levels))]
    for level in net.levels:
        state = level.state()
        parts.append(struct.pack("<IdI", level.input_channels, level.threshold, len(state)))
        for name, arr in state.items():
            parts.append(_str(name))
            parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(net: MultiLevelNet, path, config_text: str = "") -> None:
    atomic_write_bytes(path, encode_checkpoint(net, config_text))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what: str) -> str:
        (n,) = self.unpack("<I", what)
        try:
            return self.take(n, what).decode()
        except UnicodeDecodeError:
            raise CheckpointError(f"corrupt text in {what}") from None


def _header(r: _Reader) -> CheckpointHeader:
    magic = r.take(4, "magic bytes")
    if magic != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {magic!r} != {MAGIC!r}")
    (version,) = r.unpack("<I", "format version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {VERSION}")
    rng_name = r.string("rng algorithm")
    chash = r.string("config hash")
    ctext = r.string("config text")
    base, final, seed = r.unpack("<IdQ", "network header")
    (nw,) = r.unpack("<I", "width count")
    widths = r.unpack(f"<{nw}I", "widths")
    (nlev,) = r.unpack("<I", "level count")
    return CheckpointHeader(version, rng_name, chash, ctext, base, final, seed, tuple(widths), nlev)


def read_header(path) -> CheckpointHeader:
    return _header(_Reader(Path(path).read_bytes()))


def decode_checkpoint(data: bytes, expected_hash: str | None = None):
    """Returns ``(net, header)``."""
    r = _Reader(data)
    hdr = _header(r)
    if expected_hash is not None and expected_hash != hdr.config_hash:
        raise ConfigMismatchError(f"checkpoint config hash {hdr.config_hash[:12]} does not match "
                                  f"the loading config {expected_hash[:12]}")
    if hdr.level_count < 1:
        raise CheckpointError("checkpoint holds no levels")
    levels = []
    for li in range(hdr.level_count):
        in_ch, threshold, nblocks = r.unpack("<IdI", f"level {li + 1} header")
        level = build_level(make_rng(0), in_ch, hdr.widths, threshold)
        state = level.state()
        if nblocks != len(state):
            raise CheckpointError(f"level {li + 1} has {nblocks} blocks, expected {len(state)}")
        for bi in range(nblocks):
            name = r.string(f"level {li + 1} block {bi} name")
            if name not in state:
                raise CheckpointError(f"level {li + 1}: unexpected block {name!r}")
            (ndim,) = r.unpack("<I", f"block {name} rank")
            dims = r.unpack(f"<{ndim}I", f"block {name} shape")
            if tuple(dims) != state[name].shape:
                raise CheckpointError(f"block {name} has shape {dims}, expected {state[name].shape}")
            raw = r.take(4 * int(np.prod(dims)), f"block {name} data (level {li + 1})")
            state[name][...] = np.frombuffer(raw, dtype="<f4").reshape(dims)
        levels.append(level)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last block")
    net = MultiLevelNet(levels, hdr.final_threshold, hdr.seed, hdr.config_hash, hdr.base_size)
    return net, hdr


def load_checkpoint(path, expected_hash: str | None = None):
    return decode_checkpoint(Path(path).read_bytes(), expected_hash)
