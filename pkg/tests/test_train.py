import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import synthetic_samples
from dcednet import network as N
from dcednet.checkpoint import encode_checkpoint
from dcednet.dataset import stack
from dcednet.metrics import TABLE_ROWS
from dcednet.network import GateDecision
from dcednet.tensor import finite_difference_grad, make_rng
from dcednet.train import (AdamState, NonFiniteLossError, TrainConfig, TrainHistory, adam_step,
                           kfold_split, mse_loss, run_kfold, split_indices, train_level,
                           train_network)

SMALL = (4, 6, 8, 10, 12)


@pytest.fixture(scope="module")
def tiny_samples():
    return synthetic_samples(8, size=32, seed=5, cells=4)


def tiny_net(levels=1, seed=0):
    return N.build_net(seed, levels, N.DEFAULT_THRESHOLDS[:levels], SMALL, base_size=32)


# -- loss ---------------------------------------------------------------------

def test_mse_equal_inputs():
    x = np.array([1.0, 2.0, 3.0])
    loss, grad = mse_loss(x, x)
    assert loss == 0.0 and np.all(grad == 0)


def test_mse_hand_value():
    loss, _ = mse_loss(np.array([2.0, 2.0, 2.0]), np.array([1.0, 2.0, 3.0]))
    assert abs(loss - 2 / 3) <= 1e-12


@given(st.integers(0, 10**6), st.integers(1, 20))
@settings(max_examples=20)
def test_mse_gradient(seed, n):
    rng = make_rng(seed)
    p, g = rng.standard_normal((2, n))
    _, grad = mse_loss(p, g)
    num = finite_difference_grad(lambda x: mse_loss(x, g)[0], p)
    np.testing.assert_allclose(grad, num, atol=1e-8)


# -- adam ---------------------------------------------------------------------

def test_adam_zero_grad():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    adam_step(p, {"w": np.zeros(2)}, state, 1e-3)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    assert state.step == 1


@pytest.mark.parametrize("g", [0.5, -3.0, 1e-3])
def test_adam_first_step_magnitude(g):
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([g])}, AdamState(), 1e-3)
    # bias-corrected first step is lr * g / (|g| + eps)
    assert p["w"][0] == pytest.approx(-1e-3 * np.sign(g), rel=1e-4)


def test_adam_deterministic():
    def run():
        rng = make_rng(0)
        p = {"a": rng.standard_normal(5), "b": rng.standard_normal((2, 2))}
        st_ = AdamState()
        for _ in range(10):
            adam_step(p, {k: rng.standard_normal(v.shape) for k, v in p.items()}, st_, 1e-2)
        return p, st_
    (p1, s1), (p2, s2) = run(), run()
    for k in p1:
        assert p1[k].tobytes() == p2[k].tobytes()
        assert s1.m[k].tobytes() == s2.m[k].tobytes() and s1.v[k].shape == p1[k].shape


# -- train_level --------------------------------------------------------------

def _arrays(samples):
    x, y = stack(samples)
    return (x[:6], y[:6]), (x[6:], y[6:])


def test_gate_stops_on_scripted_scores(tiny_samples):
    scores = iter([0.4, 0.6, 0.9])
    cfg = TrainConfig(max_epochs_per_level=10, iterations_per_epoch=1)
    tr, va = _arrays(tiny_samples)
    _, hist = train_level(tiny_net().levels[0], tr, va, cfg, evaluate=lambda lvl: next(scores),
                          threshold=0.5)
    assert [r.epoch for r in hist.rows] == [1, 2]
    assert [r.decision for r in hist.rows] == [GateDecision.REPEAT, GateDecision.ADVANCE]
    assert hist.reached[0]


def test_zero_threshold_stops_after_one_epoch(tiny_samples):
    tr, va = _arrays(tiny_samples)
    cfg = TrainConfig(max_epochs_per_level=10, iterations_per_epoch=1)
    _, hist = train_level(tiny_net().levels[0], tr, va, cfg, threshold=0.0)
    assert len(hist.rows) == 1 and hist.rows[0].decision is GateDecision.ADVANCE


def test_epoch_limit(tiny_samples):
    tr, va = _arrays(tiny_samples)
    cfg = TrainConfig(max_epochs_per_level=3, iterations_per_epoch=1)
    _, hist = train_level(tiny_net().levels[0], tr, va, cfg, evaluate=lambda lvl: 0.1)
    assert len(hist.rows) == 3 and not hist.reached[0]


def test_non_finite_loss_aborts(tiny_samples):
    tr, va = _arrays(tiny_samples)
    level = tiny_net().levels[0]
    level.head.bias[...] = np.nan
    with pytest.raises(NonFiniteLossError):
        train_level(level, tr, va, TrainConfig(max_epochs_per_level=2))


def test_loss_decreases(tiny_samples):
    tr, va = _arrays(tiny_samples)
    cfg = TrainConfig(learning_rate=1e-3, max_epochs_per_level=15)
    _, hist = train_level(tiny_net().levels[0], tr, va, cfg, evaluate=lambda lvl: 0.0)
    assert hist.rows[-1].loss < hist.rows[0].loss


@pytest.mark.parametrize("bad", [dict(learning_rate=0), dict(minibatch=0), dict(folds=1),
                                 dict(split_fraction=0.0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


# -- train_network ------------------------------------------------------------

def test_single_level_network(tiny_samples):
    cfg = TrainConfig(learning_rate=1e-3, max_epochs_per_level=3, max_global_rounds=0)
    net, hist = train_network(tiny_net(), tiny_samples, cfg)
    assert {r.level for r in hist.rows} == {0}
    assert hist.wall_time > 0


def _history_ok(hist):
    epochs = [r.epoch for r in hist.rows]
    assert epochs == sorted(epochs) and len(set(epochs)) == len(epochs)
    base = [r.level for r in hist.rows if r.round == 0]
    assert base == sorted(base)
    for rnd in {r.round for r in hist.rows} - {0}:
        lv = [r.level for r in hist.rows if r.round == rnd]
        assert lv == sorted(lv) and lv[-1] == max(r.level for r in hist.rows)


def test_global_round_retrains_downstream(tiny_samples):
    cfg = TrainConfig(learning_rate=1e-3, max_epochs_per_level=1, final_threshold=0.999,
                      max_global_rounds=1)
    net = N.build_net(0, 2, (0.5, 0.8), SMALL, base_size=32, final_threshold=0.999)
    _, hist = train_network(net, tiny_samples, cfg)
    assert max(r.round for r in hist.rows) == 1
    _history_ok(hist)


def test_network_deterministic(tiny_samples):
    cfg = TrainConfig(learning_rate=1e-3, max_epochs_per_level=2, final_threshold=0.999,
                      max_global_rounds=1)
    runs = []
    for _ in range(2):
        net = N.build_net(0, 2, (0.5, 0.8), SMALL, base_size=32, final_threshold=0.999)
        net, hist = train_network(net, tiny_samples, cfg)
        runs.append((encode_checkpoint(net), hist.to_csv()))
    assert runs[0] == runs[1]


def test_history_csv_format():
    from dcednet.train import HistoryRow
    h = TrainHistory([HistoryRow(1, 0, 0.25, 0.5, GateDecision.ADVANCE)])
    assert h.to_csv() == "epoch,level,loss,c_o,decision,round\n1,0,0.25,0.5,advance,0\n"


def test_split_indices():
    tr, va = split_indices(10, 0.8, 3)
    assert len(va) == 2 and len(set(tr) | set(va)) == 10 and not set(tr) & set(va)


# -- k-fold -------------------------------------------------------------------

def test_kfold_partition():
    folds = kfold_split(10, 5, 0, split_fraction=1.0)
    vals = [set(f.validation) for f in folds]
    assert all(len(v) == 2 for v in vals)
    assert all(not (a & b) for i, a in enumerate(vals) for b in vals[i + 1:])
    assert set().union(*vals) == set(range(10))


@given(st.integers(4, 60), st.integers(2, 5), st.integers(0, 1000), st.floats(0.5, 1.0))
def test_kfold_properties(n, k, seed, sf):
    try:
        folds = kfold_split(n, k, seed, sf)
    except ValueError:
        return
    test = set(folds[0].test)
    rest = set(range(n)) - test
    assert set().union(*(set(f.validation) for f in folds)) == rest
    for f in folds:
        assert set(f.train) | set(f.validation) == rest and not set(f.train) & set(f.validation)
        assert set(f.test) == test
    again = kfold_split(n, k, seed, sf)
    assert all(np.array_equal(a.validation, b.validation) for a, b in zip(folds, again))


def test_run_kfold_smoke(tiny_samples):
    cfg = TrainConfig(learning_rate=1e-3, max_epochs_per_level=2, max_global_rounds=0,
                      split_fraction=0.75)
    run = run_kfold(tiny_samples, cfg, tiny_net, k=2)
    assert len(run.report.folds) == 2 and len(run.nets) == 2
    for key, _ in TABLE_ROWS:
        for fold in run.report.folds:
            assert fold.value(key) is not None
        mean = float(np.mean([f.value(key) for f in run.report.folds]))
        assert abs(run.report.value(key) - mean) <= 1e-9
