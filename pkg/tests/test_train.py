from __future__ import annotations

import csv
import datetime as dt

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import adam_trace
from pvcgn import autodiff as ad
from pvcgn.errors import ConfigError, NumericsError, ShapeError
from pvcgn.ingest import DatasetSplit, DayRange, NormStats, RidershipTensor, make_windows
from pvcgn.model import ModelConfig, init_params
from pvcgn.train import (
    LOG_COLUMNS,
    AdamState,
    TrainConfig,
    adam_step,
    backward,
    clip_gradients,
    global_norm,
    grad_check,
    loss_and_grads,
    lr_schedule,
    mae_loss,
    random_graphs,
    relative_error,
    train,
)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + h
        up = f(x)
        x.flat[i] = orig - h
        down = f(x)
        x.flat[i] = orig
        g.flat[i] = (up - down) / (2 * h)
    return g


def check_op(build, *shapes, seed=0, tol=1e-7):
    """Compare tape gradients of sum(w * build(*inputs)) against finite differences."""
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=s) for s in shapes]
    weight = rng.normal(size=np.shape(build(*xs)))
    tape = ad.Tape()
    leaves = {str(i): tape.leaf(x) for i, x in enumerate(xs)}
    out = build(*leaves.values())
    loss = ad.mean_squared_error(ad.mul(out, weight), np.zeros_like(weight))
    grads = backward(loss, leaves)
    for i, x in enumerate(xs):
        def f(v, i=i):
            args = [v if j == i else xs[j] for j in range(len(xs))]
            r = np.asarray(build(*args)) * weight
            return float(np.mean(r * r))

        num = numeric_grad(f, x.copy())
        assert np.max(np.abs(grads[str(i)] - num)) <= tol * max(1.0, np.max(np.abs(num))), f"input {i}"


def test_primitive_vjps():
    check_op(ad.add, (3, 4), (4,))
    check_op(ad.sub, (2, 3), (2, 1))
    check_op(ad.mul, (3, 4), (3, 4))
    check_op(ad.matmul, (5, 3), (3, 2))
    check_op(ad.matmul, (4, 2, 3), (3, 5))
    check_op(ad.sigmoid, (3, 3))
    check_op(ad.tanh, (3, 3))
    check_op(lambda a, b: ad.concat([a, b], axis=1), (2, 3), (2, 4))
    check_op(lambda a: ad.reshape(a, (6, 2)), (3, 4))
    check_op(lambda a: ad.moveaxis(a, 0, 2), (2, 3, 4))
    check_op(lambda a: ad.broadcast_to(a, (3, 4)), (4,))
    check_op(lambda a: ad.rows(a, 1, 3), (4, 2))
    check_op(lambda a, b: ad.stack([a, b], axis=1), (2, 3), (2, 3))
    check_op(lambda gx, gh, b, h: ad.gru_cell(gx, gh, b, h), (3, 6), (3, 6), (6,), (3, 2))


def test_graph_aggregate_vjp():
    g = random_graphs(5, np.random.default_rng(1))
    mats = [g.physical.matrix, g.correlation.matrix]
    tr = [g.physical.matrix_t, g.correlation.matrix_t]
    check_op(lambda x: ad.graph_aggregate(x, mats, tr), (5, 3))
    check_op(lambda x: ad.graph_aggregate(x, mats, tr), (5, 2, 3))


def test_quadratic_gradient_exact():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(4, 4))
    x0 = rng.normal(size=(4, 1))
    tape = ad.Tape()
    x = tape.leaf(x0)
    y = ad.matmul(A, x)
    loss = ad.mean_squared_error(y, np.zeros((4, 1)))
    g = backward(loss, {"x": x})["x"]
    num = numeric_grad(lambda v: float(np.mean((A @ v) ** 2)), x0.copy(), h=1e-5)
    assert max(relative_error(a, f, 1e-12) for a, f in zip(g.ravel(), num.ravel())) < 1e-9


def test_mae_loss_examples():
    rng = np.random.default_rng(3)
    p, t = rng.normal(size=(4, 3, 2)), rng.normal(size=(4, 3, 2))
    assert float(mae_loss(p, p)) == 0.0
    assert float(mae_loss(t + 1, t)) == pytest.approx(1.0, abs=1e-12)
    total = 0.0
    for a, b in zip(p.ravel(), t.ravel()):
        total += abs(a - b)
    assert abs(float(mae_loss(p, t)) - total / p.size) <= 1e-12
    with pytest.raises(ShapeError):
        mae_loss(p, t[:2])


def test_unused_parameter_has_zero_gradient():
    tape = ad.Tape()
    a, b = tape.leaf(np.ones(3)), tape.leaf(np.ones(3))
    loss = mae_loss(ad.mul(a, 2.0), np.zeros(3))
    grads = backward(loss, {"a": a, "b": b})
    assert np.array_equal(grads["b"], np.zeros(3))


def test_affine_mae_sign_closed_form():
    rng = np.random.default_rng(4)
    X, T = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    W0 = rng.normal(size=(3, 2))
    tape = ad.Tape()
    W = tape.leaf(W0)
    grads = backward(mae_loss(ad.matmul(X, W), T), {"W": W})
    want = X.T @ np.sign(X @ W0 - T) / T.size
    assert np.max(np.abs(grads["W"] - want)) <= 1e-15


def test_abs_subgradient_zero_at_kink():
    tape = ad.Tape()
    p = tape.leaf(np.array([1.0, 2.0]))
    grads = backward(mae_loss(p, np.array([1.0, 0.0])), {"p": p})
    assert grads["p"].tolist() == [0.0, 0.5]


def test_nonfinite_gradient_names_op():
    tape = ad.Tape()
    a = tape.leaf(np.ones(2))
    loss = mae_loss(ad.mul(a, np.array([np.inf, 1.0])), np.zeros(2))
    with pytest.raises(NumericsError, match="mul"):
        backward(loss, {"a": a})


def test_nonfinite_gate_named():
    gx = np.full((2, 6), np.nan)
    with pytest.raises(NumericsError, match="reset"):
        ad.gru_cell(gx, np.zeros((2, 6)), np.zeros(6), np.zeros((2, 2)))


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    st_ = AdamState()
    for _ in range(3):
        p = adam_step(p, {"w": np.zeros(2)}, st_)
    assert p["w"].tolist() == [1.0, -2.0]


def test_adam_single_step():
    p = adam_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, AdamState(lr=1e-3))
    assert p["w"][0] == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-15)


def test_adam_matches_hand_trace():
    # quadratic f(w) = (w - 3)^2, gradient 2 (w - 3)
    state, p, grads_seen = AdamState(lr=0.1), {"w": np.array([0.5])}, []
    got = []
    for _ in range(5):
        g = 2 * (p["w"] - 3.0)
        grads_seen.append(float(g[0]))
        p = adam_step(p, {"w": g}, state)
        got.append(float(p["w"][0]))
    assert np.allclose(got, adam_trace(0.5, grads_seen, lr=0.1), atol=1e-15, rtol=0)


def test_adam_order_invariant_and_shape_check():
    rng = np.random.default_rng(5)
    params = {k: rng.normal(size=3) for k in "abc"}
    grads = {k: rng.normal(size=3) for k in "abc"}
    fwd = adam_step(params, grads, AdamState())
    rev = adam_step(dict(reversed(list(params.items()))), grads, AdamState())
    assert all(np.array_equal(fwd[k], rev[k]) for k in "abc")
    with pytest.raises(ShapeError):
        adam_step({"a": np.zeros(2)}, {"a": np.zeros(3)}, AdamState())


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 0.001
    assert lr_schedule(99, cfg) == 0.001
    assert lr_schedule(100, cfg) == pytest.approx(1e-4, rel=1e-12)
    assert lr_schedule(150, cfg) == pytest.approx(1e-5, rel=1e-12)
    with pytest.raises(ConfigError):
        lr_schedule(-1, cfg)


def test_train_config_validation():
    for bad in (dict(lr0=0), dict(lr_decay=0), dict(lr_decay=1.5), dict(loss="huber"), dict(epochs=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


@given(st.floats(0.01, 10), st.integers(0, 2**16))
def test_clip_bound(max_norm, seed):
    rng = np.random.default_rng(seed)
    grads = {k: rng.normal(size=(3, 2)) * rng.uniform(0, 10) for k in "xyz"}
    clipped, pre = clip_gradients(grads, max_norm)
    assert global_norm(clipped) <= max_norm + 1e-9
    assert pre == pytest.approx(global_norm(grads))
    if pre <= max_norm:
        assert all(np.array_equal(clipped[k], grads[k]) for k in grads)


def _tiny_dataset(values, n=2, m=2):
    days = tuple(DayRange(dt.date(2019, 1, 1 + k), k * 8, (k + 1) * 8, 360) for k in range(len(values) // 8))
    tensor = RidershipTensor(values, 15, days)
    ws = make_windows(tensor, n, m)
    return ws, tensor


def test_train_constant_targets_converge():
    rng = np.random.default_rng(6)
    values = np.full((16, 3, 2), 0.4)
    ws, _ = _tiny_dataset(values)
    ws = [w.__class__(rng.normal(size=w.input.shape), w.target, w.t_anchor) for w in ws]
    cfg = ModelConfig(n_stations=3, d=4, layers=1, horizon=2)
    res = train(DatasetSplit(ws, ws, []), random_graphs(3, rng, 1), cfg,
                TrainConfig(epochs=50, batch_size=8, lr0=0.01, decay_epochs=()), NormStats(0.0, 1.0))
    assert res.log[-1].train_mae < 0.05


def test_train_overfits_one_sample_and_is_reproducible():
    rng = np.random.default_rng(7)
    values = rng.normal(size=(8, 3, 2))
    ws, _ = _tiny_dataset(values)
    one = ws[:1]
    cfg = ModelConfig(n_stations=3, d=8, layers=2, horizon=2)
    g = random_graphs(3, rng, 1)
    tc = TrainConfig(epochs=200, batch_size=1, lr0=0.01, decay_epochs=(), seed=3)
    res = train(DatasetSplit(one, one, []), g, cfg, tc, NormStats(0.0, 1.0))
    maes = [r.train_mae for r in res.log]
    assert maes[-1] < 0.05 and min(maes[-20:]) < maes[0]
    again = train(DatasetSplit(one, one, []), g, cfg, tc, NormStats(0.0, 1.0))
    assert all(res.final_params[k].tobytes() == again.final_params[k].tobytes() for k in res.final_params)


def test_train_log_and_best_epoch(tmp_path):
    rng = np.random.default_rng(8)
    ws, _ = _tiny_dataset(rng.normal(size=(24, 3, 2)))
    cfg = ModelConfig(n_stations=3, d=4, layers=1, horizon=2)
    res = train(DatasetSplit(ws[:8], ws[8:], []), random_graphs(3, rng, 1), cfg,
                TrainConfig(epochs=4, batch_size=4, decay_epochs=(2,)), NormStats(0.0, 1.0))
    assert [r.epoch for r in res.log] == [0, 1, 2, 3]
    assert res.log[2].lr == pytest.approx(1e-4)
    assert res.log[res.best_epoch].val_mae == min(r.val_mae for r in res.log)
    res.write_log(tmp_path / "log.csv")
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == 5


def test_train_scheduled_sampling_runs():
    rng = np.random.default_rng(9)
    ws, _ = _tiny_dataset(rng.normal(size=(16, 3, 2)), m=3)
    cfg = ModelConfig(n_stations=3, d=4, layers=1, horizon=3)
    tc = TrainConfig(epochs=2, batch_size=4, scheduled_sampling=1.0)
    res = train(DatasetSplit(ws, [], []), random_graphs(3, rng, 1), cfg, tc, NormStats(0.0, 1.0))
    assert np.isfinite(res.log[-1].train_mae)


def test_train_rejects_nonfinite_and_empty():
    rng = np.random.default_rng(10)
    ws, _ = _tiny_dataset(np.full((8, 3, 2), np.nan))
    cfg = ModelConfig(n_stations=3, d=4, layers=1, horizon=2)
    with pytest.raises(NumericsError):
        train(DatasetSplit(ws, [], []), random_graphs(3, rng, 1), cfg, TrainConfig(epochs=1), NormStats(0.0, 1.0))
    with pytest.raises(ConfigError):
        train(DatasetSplit([], [], []), random_graphs(3, rng, 1), cfg, TrainConfig(epochs=1), NormStats(0.0, 1.0))


def test_loss_and_grads_all_parameters():
    rng = np.random.default_rng(11)
    cfg = ModelConfig(n_stations=4, d=3, layers=2, horizon=2)
    params = init_params(cfg, 0)
    x, y = rng.normal(size=(2, 2, 4, 2)), rng.normal(size=(2, 2, 4, 2))
    loss, grads = loss_and_grads(params, random_graphs(4, rng), cfg, x, y)
    assert set(grads) == set(params) and np.isfinite(loss)
    assert all(grads[k].shape == params[k].shape for k in params)


@pytest.mark.parametrize("loss,tol", [("mse", 1e-6), ("mae", 1e-4)])
def test_grad_check_small(loss, tol):
    cfg = ModelConfig(n_stations=4, d=4, layers=2, horizon=2)
    rep = grad_check(cfg, seed=1, loss=loss, tol=tol, n_coords=60)
    assert rep.passed, rep.line()
    assert rep.line().startswith("PASS")
