"""Encoder-decoder levels, the comparison gate, and multi-level composition.

One level is five encoder pools followed by five decoder pools and a 3x3
output head. An encoder pool runs conv -> batchnorm -> relu -> dropout on its
input, concatenates the input back on (so the pool emits exactly the target
channel count) and average-pools 2x2. A decoder pool upsamples with a
stride-2 transpose convolution, normalizes, activates, optionally drops out,
then concatenates the same-resolution encoder tensor. At base 320 with the
full widths the encoder emits (32,160,160), (64,80,80), (128,40,40),
(256,20,20), (512,10,10) and the head emits a (1,320,320) probability map.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .tensor import DTYPE, ShapeError, check_tensor, concat_channels, make_rng

FULL_WIDTHS = (32, 64, 128, 256, 512)
DEFAULT_THRESHOLDS = (0.50, 0.80, 0.95)
ENCODER_DROPOUT = (0.0, 0.0, 0.0, 0.2, 0.2)
DECODER_DROPOUT = (0.2, 0.2, 0.0, 0.0, 0.0)
NUM_POOLS = 5
DIVISOR = 2 ** NUM_POOLS


class GateDecision(enum.Enum):
    ADVANCE = "advance"
    REPEAT = "repeat"


@dataclass
class PoolBlock:
    conv: L.ConvParams
    norm: L.BatchNormParams
    dropout: float = 0.0
    pool: str | None = "average"  # None for decoder pools
    skip_concat: bool = True


@dataclass
class Level:
    encoder: list[PoolBlock]
    decoder: list[PoolBlock]
    head: L.ConvParams
    input_channels: int
    threshold: float = 0.5

    def named_blocks(self):
        for k, blk in enumerate(self.encoder):
            yield f"enc{k}", blk
        for k, blk in enumerate(self.decoder):
            yield f"dec{k}", blk

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays keyed by a stable name."""
        out = {}
        for name, blk in self.named_blocks():
            out[f"{name}.conv.weight"] = blk.conv.weight
            out[f"{name}.conv.bias"] = blk.conv.bias
            out[f"{name}.norm.gamma"] = blk.norm.gamma
            out[f"{name}.norm.beta"] = blk.norm.beta
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Parameters plus batchnorm running statistics, in checkpoint order."""
        out = {}
        for name, blk in self.named_blocks():
            out[f"{name}.conv.weight"] = blk.conv.weight
            out[f"{name}.conv.bias"] = blk.conv.bias
            out[f"{name}.norm.gamma"] = blk.norm.gamma
            out[f"{name}.norm.beta"] = blk.norm.beta
            out[f"{name}.norm.running_mean"] = blk.norm.running_mean
            out[f"{name}.norm.running_var"] = blk.norm.running_var
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out

    @property
    def widths(self) -> tuple[int, ...]:
        chans, c = [], self.input_channels
        for blk in self.encoder:
            c = c + blk.conv.c_out
            chans.append(c)
        return tuple(chans)

    def astype(self, dtype) -> "Level":
        lvl = copy.deepcopy(self)
        convs = [blk.conv for _, blk in lvl.named_blocks()] + [lvl.head]
        for p in convs:
            p.weight, p.bias = p.weight.astype(dtype), p.bias.astype(dtype)
        for _, blk in lvl.named_blocks():
            n = blk.norm
            n.gamma, n.beta = n.gamma.astype(dtype), n.beta.astype(dtype)
            n.running_mean = n.running_mean.astype(dtype)
            n.running_var = n.running_var.astype(dtype)
        return lvl


@dataclass
class MultiLevelNet:
    levels: list[Level]
    final_threshold: float = 0.95
    seed: int = 0
    config_hash: str = ""
    base_size: int = 320

    def __post_init__(self):
        if not self.levels:
            raise ValueError("a network needs at least one level")
        ts = [lvl.threshold for lvl in self.levels]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"level thresholds must be strictly increasing, got {ts}")

    @property
    def thresholds(self) -> list[float]:
        return [lvl.threshold for lvl in self.levels]


def widths_for(multiplier: float) -> tuple[int, ...]:
    return tuple(max(1, int(round(w * multiplier))) for w in FULL_WIDTHS)


def _conv_params(rng, c_out, c_in, dtype):
    std = np.sqrt(2.0 / (c_in * L.KERNEL * L.KERNEL))
    w = (rng.standard_normal((c_out, c_in, L.KERNEL, L.KERNEL)) * std).astype(dtype)
    return L.ConvParams(w, np.zeros(c_out, dtype))


def build_level(rng: np.random.Generator, input_channels: int,
                widths=FULL_WIDTHS, threshold: float = 0.5, dtype=DTYPE) -> Level:
    """Randomly initialized level (He-normal convs, unit batchnorm)."""
    widths = tuple(int(w) for w in widths)
    if len(widths) != NUM_POOLS:
        raise ValueError(f"need {NUM_POOLS} encoder widths, got {widths}")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    prev = input_channels
    for w in widths:
        if w <= prev:
            raise ValueError(f"encoder widths must strictly grow from {input_channels} "
                             f"input channels, got {widths}")
        prev = w

    encoder, c_in = [], input_channels
    for k, w in enumerate(widths):
        encoder.append(PoolBlock(_conv_params(rng, w - c_in, c_in, dtype),
                                 L.BatchNormParams.create(w - c_in, dtype),
                                 ENCODER_DROPOUT[k], "average", True))
        c_in = w

    # decoder pool k upsamples to the resolution of encoder pool 4-k's input
    skip_channels = list(reversed((input_channels,) + widths[:-1]))
    up_channels = [widths[3], widths[2], widths[1], widths[0], max(1, widths[0] // 2)]
    decoder, c_in = [], widths[-1]
    for k in range(NUM_POOLS):
        c_up = up_channels[k]
        decoder.append(PoolBlock(_conv_params(rng, c_up, c_in, dtype),
                                 L.BatchNormParams.create(c_up, dtype),
                                 DECODER_DROPOUT[k], None, True))
        c_in = c_up + skip_channels[k]
    head = _conv_params(rng, 1, c_in, dtype)
    return Level(encoder, decoder, head, input_channels, float(threshold))


def build_net(seed: int = 0, levels: int = 3, thresholds=DEFAULT_THRESHOLDS,
              widths=FULL_WIDTHS, input_channels: int = 3, final_threshold: float | None = None,
              base_size: int = 320, config_hash: str = "", dtype=DTYPE) -> MultiLevelNet:
    thresholds = tuple(thresholds)
    if len(thresholds) != levels:
        raise ValueError(f"{levels} levels need {levels} thresholds, got {thresholds}")
    check_base_size(base_size)
    rng = make_rng(seed)
    lvls = [build_level(rng, input_channels if i == 0 else 1, widths, thresholds[i], dtype)
            for i in range(levels)]
    return MultiLevelNet(lvls, thresholds[-1] if final_threshold is None else final_threshold,
                         seed, config_hash, base_size)


def check_base_size(size: int) -> int:
    if size < DIVISOR or size % DIVISOR:
        raise ShapeError(f"spatial size must be a multiple of {DIVISOR} and >= {DIVISOR}, got {size}")
    return size


# -- forward / backward -------------------------------------------------------

def _mode_flags(mode):
    if mode not in ("training", "inference"):
        raise ValueError(f"mode must be 'training' or 'inference', got {mode!r}")
    return mode == "training"


def encoder_forward(level: Level, x: np.ndarray, mode: str = "inference", rng=None):
    """Run the five encoder pools.

    Returns ``(code, skips, caches)``. ``skips[k]`` is the tensor that decoder
    pool ``k`` concatenates: the level input followed by the outputs of
    encoder pools 1-4, deepest first.
    """
    check_tensor(x, "level input")
    training = _mode_flags(mode)
    if x.shape[1] != level.input_channels:
        raise ShapeError(f"level expects {level.input_channels} channels, got {x.shape[1]}")
    for d in x.shape[2:]:
        check_base_size(d)
    outputs, caches, h = [x], [], x
    for blk in level.encoder:
        a, c_conv = L.conv2d(h, blk.conv)
        a, c_bn = L.batchnorm(a, blk.norm, mode)
        a, c_relu = L.relu(a)
        a, c_drop = L.dropout(a, L.DropoutSpec(blk.dropout, training), rng)
        cat = concat_channels(a, h)
        h, c_pool = L.pool2x2(cat, blk.pool)
        caches.append((c_conv, c_bn, c_relu, c_drop, c_pool, a.shape[1]))
        outputs.append(h)
    skips = list(reversed(outputs[:-1]))
    return h, skips, caches


def decoder_forward(level: Level, code: np.ndarray, skips, mode: str = "inference", rng=None):
    """Upsample ``code`` back to full resolution; returns ``(prob, caches)``."""
    training = _mode_flags(mode)
    if len(skips) != NUM_POOLS:
        raise ShapeError(f"decoder needs {NUM_POOLS} skip tensors, got {len(skips)}")
    caches, h = [], code
    for blk, skip in zip(level.decoder, skips):
        u, c_tc = L.transpose_conv2d(h, blk.conv)
        if u.shape[2:] != skip.shape[2:] or u.shape[0] != skip.shape[0]:
            raise ShapeError(f"skip shape {skip.shape} does not match upsampled {u.shape}")
        u, c_bn = L.batchnorm(u, blk.norm, mode)
        u, c_relu = L.relu(u)
        u, c_drop = L.dropout(u, L.DropoutSpec(blk.dropout, training), rng)
        h = concat_channels(u, skip)
        caches.append((c_tc, c_bn, c_relu, c_drop, u.shape[1]))
    logits, c_head = L.conv2d(h, level.head)
    prob, c_sig = L.sigmoid(logits)
    caches.append((c_head, c_sig))
    return prob, caches


def decoder_backward(level: Level, caches, grad: np.ndarray):
    """Returns ``(grad_code, grad_skips, param_grads)``."""
    grads = {}
    c_head, c_sig = caches[-1]
    g, _ = L.layer_backward("sigmoid", c_sig, grad)
    g, pg = L.layer_backward("conv", c_head, g)
    grads["head.weight"], grads["head.bias"] = pg["weight"], pg["bias"]
    grad_skips = [None] * NUM_POOLS
    for k in reversed(range(NUM_POOLS)):
        c_tc, c_bn, c_relu, c_drop, c_up = caches[k]
        g_up, grad_skips[k] = g[:, :c_up], g[:, c_up:]
        g_up, _ = L.layer_backward("dropout", c_drop, g_up)
        g_up, _ = L.layer_backward("relu", c_relu, g_up)
        g_up, pg = L.layer_backward("batchnorm", c_bn, g_up)
        grads[f"dec{k}.norm.gamma"], grads[f"dec{k}.norm.beta"] = pg["gamma"], pg["beta"]
        g, pg = L.layer_backward("tconv", c_tc, g_up)
        grads[f"dec{k}.conv.weight"], grads[f"dec{k}.conv.bias"] = pg["weight"], pg["bias"]
    return g, grad_skips, grads


def encoder_backward(level: Level, caches, grad_code: np.ndarray, grad_skips):
    """Returns ``(grad_input, param_grads)``."""
    grads = {}
    # grad_skips[k] feeds encoder output index 4-k (0 = level input)
    out_grads = list(reversed(grad_skips))
    g = grad_code
    for k in reversed(range(NUM_POOLS)):
        c_conv, c_bn, c_relu, c_drop, c_pool, c_new = caches[k]
        g_cat, _ = L.layer_backward("pool", c_pool, g)
        g_a, g_in = g_cat[:, :c_new], g_cat[:, c_new:]
        g_a, _ = L.layer_backward("dropout", c_drop, g_a)
        g_a, _ = L.layer_backward("relu", c_relu, g_a)
        g_a, pg = L.layer_backward("batchnorm", c_bn, g_a)
        grads[f"enc{k}.norm.gamma"], grads[f"enc{k}.norm.beta"] = pg["gamma"], pg["beta"]
        g_x, pg = L.layer_backward("conv", c_conv, g_a)
        grads[f"enc{k}.conv.weight"], grads[f"enc{k}.conv.bias"] = pg["weight"], pg["bias"]
        g = g_x + g_in + out_grads[k]
    return g, grads


@dataclass
class LevelTape:
    enc: list = field(default_factory=list)
    dec: list = field(default_factory=list)


def level_forward_train(level: Level, x: np.ndarray, mode: str = "training", rng=None):
    code, skips, enc = encoder_forward(level, x, mode, rng)
    prob, dec = decoder_forward(level, code, skips, mode, rng)
    return prob, LevelTape(enc, dec)


def level_backward(level: Level, tape: LevelTape, grad: np.ndarray):
    """Gradients of all trainable parameters given d(loss)/d(prob)."""
    g_code, g_skips, grads = decoder_backward(level, tape.dec, grad)
    g_in, enc_grads = encoder_backward(level, tape.enc, g_code, g_skips)
    grads.update(enc_grads)
    return g_in, grads


def level_forward(level: Level, x: np.ndarray, mode: str = "inference", rng=None) -> np.ndarray:
    prob, _ = level_forward_train(level, x, mode, rng)
    return prob


def multi_level_forward(net: MultiLevelNet, image: np.ndarray, upto: int | None = None) -> np.ndarray:
    """Inference through the first ``upto`` levels (all by default)."""
    x = image
    for level in net.levels[:upto]:
        x = level_forward(level, x, "inference")
    return x


# -- comparison gate ----------------------------------------------------------

def compute_gate(pred: np.ndarray, truth: np.ndarray) -> float:
    """Batch-averaged pixel accuracy of ``pred >= 0.5`` against a binary mask."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    agree = (pred >= 0.5) == (truth >= 0.5)
    if agree.ndim <= 2:
        return float(agree.mean())
    per_image = agree.reshape(agree.shape[0], -1).mean(axis=1)
    return float(per_image.mean())


def gate_decision(c_o: float, t_o: float) -> GateDecision:
    return GateDecision.ADVANCE if c_o >= t_o else GateDecision.REPEAT
