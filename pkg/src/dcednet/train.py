"""Loss, optimizer, gated per-level training and the k-fold harness."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import metrics
from .dataset import stack
from .network import (GateDecision, Level, MultiLevelNet, compute_gate, gate_decision,
                      level_backward, level_forward, level_forward_train)
from .tensor import ShapeError, make_rng

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    minibatch: int = 2
    max_epochs_per_level: int = 400
    iterations_per_epoch: int = 150
    final_threshold: float = 0.95
    max_global_rounds: int = 2
    seed: int = 0
    split_fraction: float = 0.9
    folds: int = 5
    with_replacement: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.minibatch < 1:
            raise ValueError(f"minibatch must be >= 1, got {self.minibatch}")
        if self.folds < 2:
            raise ValueError(f"folds must be >= 2, got {self.folds}")
        if not 0.0 < self.split_fraction <= 1.0:
            raise ValueError(f"split_fraction must lie in (0, 1], got {self.split_fraction}")
        if self.max_epochs_per_level < 1 or self.iterations_per_epoch < 1:
            raise ValueError("epoch and iteration counts must be positive")


# -- loss and optimizer -------------------------------------------------------

def mse_loss(pred: np.ndarray, truth: np.ndarray):
    """Mean squared error over all elements and its gradient w.r.t. ``pred``."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    diff = pred - truth.astype(pred.dtype, copy=False)
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    grad = diff * pred.dtype.type(2.0 / diff.size)
    return loss, grad


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> AdamState:
    """In-place bias-corrected Adam update of every array in ``params``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return state


# -- history ------------------------------------------------------------------

@dataclass
class HistoryRow:
    epoch: int
    level: int
    loss: float
    c_o: float
    decision: GateDecision
    round: int = 0


@dataclass
class TrainHistory:
    rows: list[HistoryRow] = field(default_factory=list)
    wall_time: float = 0.0
    reached: dict[int, bool] = field(default_factory=dict)

    def to_csv(self) -> str:
        lines = ["epoch,level,loss,c_o,decision,round"]
        for r in self.rows:
            lines.append(f"{r.epoch},{r.level},{r.loss!r},{r.c_o!r},{r.decision.value},{r.round}")
        return "\n".join(lines) + "\n"


# -- training -----------------------------------------------------------------

def predict(level: Level, x: np.ndarray, chunk: int = 4) -> np.ndarray:
    """Inference-mode forward in fixed-size chunks."""
    return np.concatenate([level_forward(level, x[i:i + chunk], "inference")
                           for i in range(0, x.shape[0], chunk)], axis=0)


def predict_net(net: MultiLevelNet, x: np.ndarray, upto: int | None = None) -> np.ndarray:
    for level in net.levels[:upto]:
        x = predict(level, x)
    return x


def _batches(rng, n, config: TrainConfig):
    count = min(config.iterations_per_epoch, math.ceil(n / config.minibatch))
    if config.with_replacement:
        return [rng.integers(0, n, size=min(config.minibatch, n)) for _ in range(count)]
    order = rng.permutation(n)
    return [order[b * config.minibatch:(b + 1) * config.minibatch] for b in range(count)]


def train_level(level: Level, train_set, val_set, config: TrainConfig, *,
                rng: np.random.Generator | None = None,
                evaluate: Callable[[Level], float] | None = None,
                history: TrainHistory | None = None, level_index: int = 0,
                round_index: int = 0, threshold: float | None = None):
    """Train one level until the gate advances or the epoch budget runs out.

    ``train_set`` and ``val_set`` are ``(inputs, masks)`` array pairs.
    ``evaluate`` maps the level to its epoch-end comparison score; by default
    that is the gate accuracy on ``val_set``. Returns ``(level, history)``;
    ``history.reached[level_index]`` records whether the threshold was met.
    """
    x, y = train_set
    if x.shape[0] == 0:
        raise ValueError("training set is empty")
    if evaluate is None:
        vx, vy = val_set
        if vx.shape[0] == 0:
            raise ValueError("validation set is empty")
        evaluate = lambda lvl: compute_gate(predict(lvl, vx), vy)  # noqa: E731
    rng = make_rng(config.seed) if rng is None else rng
    history = TrainHistory() if history is None else history
    t_o = level.threshold if threshold is None else threshold
    state = AdamState(beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    params = level.parameters()
    epoch = history.rows[-1].epoch if history.rows else 0
    reached = False
    for _ in range(config.max_epochs_per_level):
        epoch += 1
        losses = []
        for idx in _batches(rng, x.shape[0], config):
            prob, tape = level_forward_train(level, x[idx], "training", rng)
            loss, grad = mse_loss(prob, y[idx])
            if not math.isfinite(loss):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, level {level_index + 1}")
            _, grads = level_backward(level, tape, grad)
            adam_step(params, grads, state, config.learning_rate)
            losses.append(loss)
        c_o = float(evaluate(level))
        decision = gate_decision(c_o, t_o)
        history.rows.append(HistoryRow(epoch, level_index, float(np.mean(losses)), c_o,
                                       decision, round_index))
        log.debug("level %d epoch %d loss %.5f C_o %.4f %s", level_index + 1, epoch,
                  losses[-1], c_o, decision.value)
        if decision is GateDecision.ADVANCE:
            reached = True
            break
    history.reached[level_index] = reached
    if not reached:
        log.warning("level %d stopped at the epoch limit below threshold %.2f",
                    level_index + 1, t_o)
    return level, history


def split_indices(n: int, split_fraction: float, seed: int):
    """Deterministic (train, validation) index split."""
    if n < 2:
        raise ValueError("need at least two samples to split into train and validation")
    order = make_rng(seed).permutation(n)
    n_val = min(n - 1, max(1, int(round((1.0 - split_fraction) * n))))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def train_network(net: MultiLevelNet, dataset, config: TrainConfig, *,
                  train_idx=None, val_idx=None):
    """Train every level in order; returns ``(net, history)``.

    Level ``n + 1`` trains on level ``n``'s inference-mode outputs. When the
    final validation score stays below ``config.final_threshold`` the level
    with the lowest recorded score is retrained, at most
    ``config.max_global_rounds`` times.
    """
    start = time.perf_counter()
    x, y = stack(dataset)
    if train_idx is None or val_idx is None:
        train_idx, val_idx = split_indices(len(dataset), config.split_fraction, config.seed)
    tx, ty, vx, vy = x[train_idx], y[train_idx], x[val_idx], y[val_idx]
    rng = make_rng(np.random.SeedSequence([config.seed, 1]).generate_state(1)[0])
    history = TrainHistory()
    inputs, scores = [], []
    for i, level in enumerate(net.levels):
        inputs.append((tx, vx))
        train_level(level, (tx, ty), (vx, vy), config, rng=rng, history=history, level_index=i)
        scores.append(history.rows[-1].c_o)
        tx, vx = predict(level, tx), predict(level, vx)

    final = compute_gate(vx, vy)
    for r in range(1, config.max_global_rounds + 1):
        if final >= config.final_threshold:
            break
        k = int(np.argmin(scores))
        log.info("global round %d: final C_o %.4f < %.2f, retraining level %d",
                 r, final, config.final_threshold, k + 1)
        kx, kvx = inputs[k]
        for j in range(k, len(net.levels)):
            inputs[j] = (kx, kvx)
            # within a global round every retrained level chases the final target
            train_level(net.levels[j], (kx, ty), (kvx, vy), config, rng=rng, history=history,
                        level_index=j, round_index=r, threshold=config.final_threshold)
            scores[j] = history.rows[-1].c_o
            kx, kvx = predict(net.levels[j], kx), predict(net.levels[j], kvx)
        final = compute_gate(kvx, vy)
    history.wall_time = time.perf_counter() - start
    return net, history


# -- k-fold -------------------------------------------------------------------

@dataclass
class FoldSplit:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def kfold_split(n: int, k: int, seed: int, split_fraction: float = 0.9) -> list[FoldSplit]:
    """Hold out a test set, then rotate ``k`` disjoint validation folds."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    order = make_rng(seed).permutation(n)
    n_test = int(round((1.0 - split_fraction) * n))
    test, rest = np.sort(order[:n_test]), order[n_test:]
    if k > rest.size:
        raise ValueError(f"cannot make {k} folds from {rest.size} non-test samples")
    folds = np.array_split(rest, k)
    return [FoldSplit(np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i])),
                      np.sort(folds[i]), test) for i in range(k)]


def evaluate_split(net: MultiLevelNet, samples, theta=None) -> list[metrics.ImageEval]:
    if not samples:
        return []
    x, _ = stack(samples)
    prob = predict_net(net, x)
    return [metrics.evaluate_image(prob[i, 0], s.mask, s.tag, theta) for i, s in enumerate(samples)]


def evaluate_run(net: MultiLevelNet, dataset, train_idx, val_idx, test_idx=()) -> metrics.FoldResult:
    pick = lambda idx: [dataset[i] for i in idx]  # noqa: E731
    return metrics.FoldResult(evaluate_split(net, pick(train_idx)),
                              evaluate_split(net, pick(val_idx)),
                              evaluate_split(net, pick(test_idx)))


@dataclass
class KFoldRun:
    report: metrics.MetricsReport
    nets: list[MultiLevelNet]
    histories: list[TrainHistory]
    splits: list[FoldSplit]


def run_kfold(dataset, config: TrainConfig, make_net: Callable[[], MultiLevelNet],
              k: int | None = None) -> KFoldRun:
    """Train and evaluate one fresh network per fold."""
    k = config.folds if k is None else k
    splits = kfold_split(len(dataset), k, config.seed, config.split_fraction)
    results, nets, histories = [], [], []
    for i, sp in enumerate(splits):
        log.info("fold %d/%d: %d train, %d validation, %d test", i + 1, k,
                 sp.train.size, sp.validation.size, sp.test.size)
        net, hist = train_network(make_net(), dataset, config,
                                  train_idx=sp.train, val_idx=sp.validation)
        results.append(evaluate_run(net, dataset, sp.train, sp.validation, sp.test))
        nets.append(net)
        histories.append(hist)
    return KFoldRun(metrics.build_report(results), nets, histories, splits)
