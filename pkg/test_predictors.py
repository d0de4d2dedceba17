#!/usr/bin/env python3
import math
import os
import sys
import time

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import predictors
from config import LinearConfig, LmsConfig
from errors import DegenerateSignalError, NumericalFailure
from evaluation import compare_predictors, rmse
from predictors import (OnlineResult, RnnConfig, RnnRtrlState, clip_joint_gradient, fit_linear, history_matrix,
                        linear_predict, lms_run, lms_step, no_prediction, rnn_grid_search, rnn_init, rnn_step,
                        run_online, run_seeds)
from synthetic import DriftSpec, make_marker_series
from tracking import SplitSpec, TrajectorySet, apply_norm, fit_norm

SPLIT = SplitSpec(n_train=120, n_val=20, n_test=20)


def sinusoid_set(n=160, noise=0.05, seed=0):
    return make_marker_series(n, [[0.8, 0.5, 4.0], [0.4, 0.9, 3.0]], [[4.0, 4.0, 4.0], [4.0, 4.0, 4.0]],
                              drift=DriftSpec(amplitude_A=1.0, period_T=40.0), noise_sigma=noise, seed=seed,
                              phases=[[0.3, 1.1, 0.0], [0.7, 0.2, 0.5]])


def test_history_matrix_layout():
    series = np.arange(12, dtype=float).reshape(4, 3)
    inputs = history_matrix(series, 2)
    assert inputs.shape == (3, 7)
    assert np.array_equal(inputs[0], [1, 0, 1, 2, 3, 4, 5])
    assert np.array_equal(inputs[2], [1, 6, 7, 8, 9, 10, 11])


def test_rnn_init_is_seeded_and_scaled():
    cfg = RnnConfig(L=1, r=1, q=250, sigma_init=0.02, seed=11)
    a, b = rnn_init(cfg), rnn_init(cfg)
    assert np.array_equal(a.W_a, b.W_a) and np.array_equal(a.W_b, b.W_b) and np.array_equal(a.W_c, b.W_c)
    assert abs(a.W_a.var() - 4e-4) < 0.1 * 4e-4
    assert np.all(a.x == 0.0) and not a.Lambda.any()
    assert a.W_b.shape == (250, 4) and a.W_c.shape == (3, 250) and a.Lambda.shape == (250, 250, 254)


def test_tiny_init_predicts_zero():
    cfg = RnnConfig(L=2, r=1, q=4, sigma_init=1e-300)
    y, _, _ = rnn_step(rnn_init(cfg), np.ones(7), np.ones(3), 0.01, 1.0)
    assert np.allclose(y, 0.0)


def test_zero_weights_stay_at_rest():
    state = RnnRtrlState(W_a=np.zeros((3, 3)), W_b=np.zeros((3, 4)), W_c=np.zeros((3, 3)), x=np.zeros(3),
                         Lambda=np.zeros((3, 3, 7)))
    y, new_state, info = rnn_step(state, np.array([1.0, 0.2, -0.3, 0.5]), np.array([1.0, 2.0, 3.0]), 0.1, 1.0)
    assert np.all(y == 0.0)
    assert np.all(new_state.x == 0.0)
    assert np.all(info.delta_c == 0.0)


def test_scalar_step_matches_hand_computation():
    Lambda = np.array([[[0.05, -0.1, 0.2]]])
    state = RnnRtrlState(W_a=np.array([[0.5]]), W_b=np.array([[0.1, 0.2]]), W_c=np.array([[0.3]]),
                         x=np.array([0.4]), Lambda=Lambda.copy())
    u = np.array([1.0, 0.6])
    eta, theta = 0.1, 10.0
    y, new, info = rnn_step(state, u, np.array([1.0]), eta, theta)

    y_ref = 0.3 * 0.4
    e_ref = 1.0 - y_ref
    delta_w = [0.05 * 0.3 * e_ref, -0.1 * 0.3 * e_ref, 0.2 * 0.3 * e_ref]
    delta_c = e_ref * 0.4
    kappa = math.sqrt(sum(d * d for d in delta_w) + delta_c * delta_c)
    pre = 0.5 * 0.4 + 0.1 * 1.0 + 0.2 * 0.6
    x_ref = math.tanh(pre)
    slope = 1.0 - x_ref ** 2
    xi = [0.4, 1.0, 0.6]
    lambda_ref = [slope * (0.5 * Lambda[0, 0, k] + xi[k]) for k in range(3)]

    assert y[0] == pytest.approx(y_ref, abs=1e-12)
    assert info.e[0] == pytest.approx(e_ref, abs=1e-12)
    assert np.allclose(info.delta_ab[0], delta_w, atol=1e-12)
    assert info.delta_c[0, 0] == pytest.approx(delta_c, abs=1e-12)
    assert info.kappa == pytest.approx(kappa, abs=1e-12)
    assert not info.clipped
    assert new.W_a[0, 0] == pytest.approx(0.5 + eta * delta_w[0], abs=1e-12)
    assert np.allclose(new.W_b[0], [0.1 + eta * delta_w[1], 0.2 + eta * delta_w[2]], atol=1e-12)
    assert new.W_c[0, 0] == pytest.approx(0.3 + eta * delta_c, abs=1e-12)
    assert np.allclose(new.Lambda[0, 0], lambda_ref, atol=1e-12)
    assert new.x[0] == pytest.approx(x_ref, abs=1e-12)


def _forward_loss(W_a, W_b, W_c, inputs, target):
    x = np.zeros(W_a.shape[0])
    for u in inputs:
        x = np.tanh(W_a @ x + W_b @ u)
    e = target - W_c @ x
    return 0.5 * float(e @ e)


@pytest.mark.parametrize('q,L,r', [(1, 1, 1), (3, 2, 1), (5, 1, 2), (3, 3, 2)])
def test_frozen_weight_gradient_matches_finite_differences(q, L, r):
    rng = np.random.default_rng(q * 100 + L * 10 + r)
    cfg = RnnConfig(L=L, r=r, q=q, sigma_init=0.5, seed=q + L + r)
    state = rnn_init(cfg)
    W_a, W_b, W_c = state.W_a.copy(), state.W_b.copy(), state.W_c.copy()
    T = 10
    inputs = np.hstack([np.ones((T, 1)), rng.normal(size=(T, cfg.m))])
    targets = rng.normal(size=(T + 1, cfg.p))
    for n in range(T):
        _, state, _ = rnn_step(state, inputs[n], targets[n], 0.0, 1e12)
    _, _, info = rnn_step(state, np.ones(cfg.m + 1), targets[T], 0.0, 1e12)

    step = 1e-6
    W_ab = np.hstack([W_a, W_b])
    fd_ab = np.zeros_like(W_ab)
    for idx in np.ndindex(*W_ab.shape):
        plus, minus = W_ab.copy(), W_ab.copy()
        plus[idx] += step
        minus[idx] -= step
        fd_ab[idx] = (_forward_loss(plus[:, :q], plus[:, q:], W_c, inputs, targets[T])
                      - _forward_loss(minus[:, :q], minus[:, q:], W_c, inputs, targets[T])) / (2 * step)
    fd_c = np.zeros_like(W_c)
    for idx in np.ndindex(*W_c.shape):
        plus, minus = W_c.copy(), W_c.copy()
        plus[idx] += step
        minus[idx] -= step
        fd_c[idx] = (_forward_loss(W_a, W_b, plus, inputs, targets[T])
                     - _forward_loss(W_a, W_b, minus, inputs, targets[T])) / (2 * step)

    # the step's deltas are the negative loss gradient
    assert np.allclose(-info.delta_ab, fd_ab, rtol=1e-5, atol=1e-8)
    assert np.allclose(-info.delta_c, fd_c, rtol=1e-5, atol=1e-8)


def test_hidden_state_is_shared_by_all_markers():
    cfg = RnnConfig(L=2, r=3, q=6, sigma_init=0.3, seed=5)
    full = rnn_init(cfg)
    first_only = RnnRtrlState(W_a=full.W_a.copy(), W_b=full.W_b.copy(), W_c=full.W_c.copy(), x=full.x.copy(),
                              Lambda=full.Lambda.copy())
    first_only.W_c[3:] = 0.0
    rng = np.random.default_rng(6)
    for _ in range(20):
        u = np.concatenate([[1.0], rng.normal(size=cfg.m)])
        d = rng.normal(size=cfg.p)
        y_full, full, _ = rnn_step(full, u, d, 0.0, 1.0)
        y_first, first_only, _ = rnn_step(first_only, u, d, 0.0, 1.0)
        assert np.array_equal(full.x, first_only.x)
        assert np.allclose(y_full[:3], y_first[:3], rtol=0.0, atol=1e-15)
        assert np.all(y_first[3:] == 0.0)


def test_clip_joint_gradient():
    rng = np.random.default_rng(0)
    deltas = [rng.normal(size=(3, 4)), rng.normal(size=(2, 3))]
    norm = math.sqrt(sum(float(np.sum(d ** 2)) for d in deltas))

    kept, kappa = clip_joint_gradient(deltas, 2 * norm)
    assert kappa == pytest.approx(norm)
    assert all(np.array_equal(a, b) for a, b in zip(kept, deltas))

    clipped, kappa = clip_joint_gradient(deltas, norm / 2)
    clipped_norm = math.sqrt(sum(float(np.sum(d ** 2)) for d in clipped))
    assert clipped_norm == pytest.approx(norm / 2, abs=1e-12)
    flat_in = np.concatenate([d.ravel() for d in deltas])
    flat_out = np.concatenate([d.ravel() for d in clipped])
    cosine = flat_in @ flat_out / (np.linalg.norm(flat_in) * np.linalg.norm(flat_out))
    assert cosine == pytest.approx(1.0, abs=1e-12)


def _check_clipping(n_steps, seed=0):
    rng = np.random.default_rng(seed)
    cfg = RnnConfig(L=2, r=1, q=4, sigma_init=0.5, seed=seed)
    state = rnn_init(cfg)
    eta, theta = 0.05, 0.5
    for _ in range(n_steps):
        u = np.concatenate([[1.0], rng.normal(scale=3.0, size=cfg.m)])
        d = rng.normal(scale=5.0, size=cfg.p)
        _, new, info = rnn_step(state, u, d, eta, theta)
        applied = math.sqrt(float(np.sum((np.hstack([new.W_a, new.W_b]) - np.hstack([state.W_a, state.W_b])) ** 2))
                            + float(np.sum((new.W_c - state.W_c) ** 2)))
        assert applied <= eta * theta + 1e-12
        if info.kappa > theta:
            assert applied == pytest.approx(eta * theta, abs=1e-12)
        state = new


def test_clipping_bounds_every_update():
    _check_clipping(300)


@pytest.mark.slow
def test_clipping_bounds_every_update_long_run():
    _check_clipping(10000, seed=1)


def test_non_finite_update_raises_with_step():
    state = RnnRtrlState(W_a=np.zeros((1, 1)), W_b=np.zeros((1, 2)), W_c=np.array([[np.inf]]), x=np.array([0.5]),
                         Lambda=np.zeros((1, 1, 3)), n=7)
    with pytest.raises(NumericalFailure) as excinfo:
        rnn_step(state, np.array([1.0, 0.0]), np.array([0.0]), 0.1, 1.0)
    assert excinfo.value.step == 7


def test_run_online_rejects_constant_series():
    ts = TrajectorySet(np.zeros((1, 3)), np.ones((160, 3)))
    with pytest.raises(DegenerateSignalError):
        run_online(ts, RnnConfig(L=3, r=1, q=4), SPLIT)


def test_run_online_alignment_and_finite_loss():
    ts = sinusoid_set()
    cfg = RnnConfig(L=4, r=2, q=8, eta=0.02, seed=3)
    result = run_online(ts, cfg, SPLIT)
    assert np.all(np.isnan(result.predictions[:cfg.L]))
    assert np.all(np.isfinite(result.predictions[cfg.L:]))
    assert np.all(np.isfinite(result.loss[cfg.L:]))
    assert result.step_time_s > 0


def test_run_online_is_causal():
    ts = sinusoid_set()
    cfg = RnnConfig(L=4, r=2, q=8, eta=0.02, seed=3)
    k = 140
    perturbed = ts.series.copy()
    perturbed[k:] += np.random.default_rng(9).normal(size=perturbed[k:].shape)
    base = run_online(ts, cfg, SPLIT).predictions
    other = run_online(ts.with_series(perturbed), cfg, SPLIT).predictions
    assert np.array_equal(base[:k + 1], other[:k + 1], equal_nan=True)
    assert not np.array_equal(base[k + 1:], other[k + 1:])


@pytest.mark.slow
def test_rnn_beats_no_prediction_on_sinusoid():
    ts = make_marker_series(1700, [[1.0, 0.8, 5.0]], [[4.0, 4.0, 4.0]], phases=[[0.4, 0.9, 0.0]],
                            noise_sigma=0.02, seed=1)
    split = SplitSpec(n_train=1500, n_val=100, n_test=100)
    result = run_online(ts, RnnConfig(L=10, r=1, q=25, eta=0.05, seed=2), split)
    test = split.test
    assert rmse(ts.series[test], result.predictions[test]) < rmse(ts.series[test], no_prediction(ts).predictions[test])


@pytest.mark.slow
def test_online_predictors_beat_no_prediction_threefold():
    ts = make_marker_series(2400, [[1.0, 0.8, 5.0]], [[4.0, 4.0, 4.0]], phases=[[0.4, 0.9, 0.0]],
                            drift=DriftSpec(amplitude_A=2.0, period_T=400.0), noise_sigma=0.05, seed=3)
    split = SplitSpec(n_train=2000, n_val=200, n_test=200)
    table = compare_predictors(ts, RnnConfig(L=10, q=25, eta=0.05), LmsConfig(L=10, eta=0.01), LinearConfig(L=10),
                               split, n_runs=10, seed=0).set_index('predictor')
    baseline = table.loc['no_prediction', 'e_rms']
    assert table.loc['rnn', 'n_runs_used'] == 10
    assert 3 * table.loc['rnn', 'e_rms'] <= baseline
    assert 3 * table.loc['lms', 'e_rms'] <= baseline


@pytest.mark.slow
def test_wider_hidden_layer_lowers_validation_error():
    ts = make_marker_series(800, [[1.0, 0.8, 5.0]], [[4.0, 4.0, 4.0]], phases=[[0.4, 0.9, 0.0]],
                            drift=DriftSpec(amplitude_A=2.0, period_T=400.0), noise_sigma=0.05, seed=4)
    split = SplitSpec(n_train=600, n_val=100, n_test=100)
    grid = {'theta': [1.0], 'eta': [0.05], 'sigma_init': [0.02], 'L': [10], 'q': [10, 100]}
    table = rnn_grid_search(ts, grid, split, n_runs=10, seed=0).table.set_index('q')
    assert table.loc[100, 'mae_mm'] <= table.loc[10, 'mae_mm']


def _best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        started = time.perf_counter()
        fn()
        times.append(time.perf_counter() - started)
    return min(times)


@pytest.mark.slow
def test_step_time_grows_cubically_with_hidden_units():
    rng = np.random.default_rng(0)

    def step_time(q):
        cfg = RnnConfig(L=40, r=3, q=q, sigma_init=0.1, seed=1)
        state = rnn_init(cfg)
        u = np.concatenate([[1.0], rng.normal(size=cfg.m)])
        d = rng.normal(size=cfg.p)
        return _best_of(lambda: rnn_step(state, u, d, 0.01, 1.0), 7)

    ratio = step_time(60) / step_time(30)
    assert 5.0 <= ratio <= 12.0, ratio


def test_lms_first_steps_match_hand_computation():
    eta = 0.1
    u1, u2 = np.array([1.0, 0.5, -0.2]), np.array([1.0, -0.4, 0.3])
    d1 = np.array([0.7, -1.1])
    W = np.zeros((2, 3))
    y1, W = lms_step(W, u1, d1, eta)
    assert np.all(y1 == 0.0)
    assert np.allclose(W, eta * np.outer(d1, u1), atol=1e-15)
    y2, _ = lms_step(W, u2, d1, eta)
    assert np.allclose(y2, eta * d1 * (u1 @ u2), atol=1e-15)


def test_lms_converges_on_stationary_target():
    eta = 0.01
    target = np.array([0.7, -1.2])
    W = np.zeros((2, 1))
    for _ in range(int(10 / eta)):
        y, W = lms_step(W, np.array([1.0]), target, eta)
    assert np.allclose(y, target, atol=1e-3)


def test_lms_run_alignment_and_frozen_weights():
    ts = sinusoid_set()
    result = lms_run(ts, 3, 0.0, SPLIT)
    assert not result.state.W.any()
    stats = fit_norm(ts, SPLIT)
    # with W = 0 every normalised forecast is 0, i.e. the training mean
    assert np.allclose(result.predictions[3:], stats.mu, atol=1e-12)
    assert np.all(np.isnan(result.predictions[:3]))

    learning = lms_run(ts, 3, 0.05, SPLIT)
    normed = apply_norm(stats, ts.series)
    assert np.allclose(learning.predictions[3], stats.mu, atol=1e-12)
    second = 0.05 * normed[3] * (history_matrix(normed, 3)[0] @ history_matrix(normed, 3)[1])
    assert np.allclose(learning.predictions[4], second * stats.sigma + stats.mu, atol=1e-10)


def test_linear_predictor_exact_ar1():
    n = 60
    series = np.outer(0.9 ** np.arange(n), [1.0, -2.0, 3.0])
    ts = TrajectorySet(np.zeros((1, 3)), series)
    split = SplitSpec(n_train=40, n_val=10, n_test=10)
    result = linear_predict(ts, 2, split)
    assert np.allclose(result.predictions[split.test], series[split.test], atol=1e-8)


def test_linear_predictor_constant_signal():
    ts = TrajectorySet(np.zeros((1, 3)), np.full((50, 3), 2.5))
    split = SplitSpec(n_train=30, n_val=10, n_test=10)
    result = linear_predict(ts, 3, split)
    assert np.allclose(result.predictions[3:], 2.5, atol=1e-8)
    assert result.state.rank_deficient


def test_linear_coefficients_match_normal_equations():
    rng = np.random.default_rng(4)
    ts = TrajectorySet(np.zeros((1, 3)), rng.normal(size=(80, 3)))
    split = SplitSpec(n_train=50, n_val=15, n_test=15)
    L = 4
    fit = fit_linear(ts, L, split)
    assert not fit.rank_deficient
    for c in range(3):
        s = ts.series[:50, c]
        X = np.array([[1.0] + [s[n - k] for k in range(1, L + 1)] for n in range(L, 50)])
        y = s[L:50]
        oracle = np.linalg.solve(X.T @ X, X.T @ y)
        assert np.allclose(fit.coefficients[c], oracle, atol=1e-8)


def test_no_prediction_cases():
    constant = TrajectorySet(np.zeros((1, 3)), np.full((10, 3), 1.5))
    assert np.allclose(no_prediction(constant).predictions[1:], 1.5)

    step = np.zeros((10, 3))
    step[6:, 2] = 4.0
    pred = no_prediction(TrajectorySet(np.zeros((1, 3)), step)).predictions
    error = np.abs(pred[1:] - step[1:])[:, 2]
    assert error[5] == 4.0 and np.count_nonzero(error) == 1

    amp, period, dt = 3.0, 4.0, 0.4
    t = np.arange(40) * dt
    series = np.zeros((40, 3))
    series[:, 0] = amp * np.sin(2 * math.pi * (t - dt / 2) / period)
    pred = no_prediction(TrajectorySet(np.zeros((1, 3)), series)).predictions
    max_error = np.max(np.abs(pred[1:, 0] - series[1:, 0]))
    assert max_error == pytest.approx(2 * amp * math.sin(math.pi * dt / period), abs=1e-12)


def _fake_runs(failing):
    def fake(ts, cfg, split):
        if cfg.seed in failing:
            raise NumericalFailure(5)
        offset = (cfg.seed % 7) * 0.01 + 0.1
        return OnlineResult(ts.series + offset, np.zeros(ts.n_frames), 0.0)
    return fake


def test_rnn_grid_failure_accounting(monkeypatch):
    ts = sinusoid_set()
    seeds = run_seeds(0, 10)
    monkeypatch.setattr(predictors, 'run_online', _fake_runs(set(seeds[:2])))
    grid = {'theta': [1.0], 'eta': [0.01], 'sigma_init': [0.02], 'L': [3], 'q': [5]}
    result = rnn_grid_search(ts, grid, SPLIT, n_runs=10, seed=0)
    row = result.table.iloc[0]
    assert row['n_failed'] == 2 and row['valid']
    # mae of a constant offset c on all three axes is c * sqrt(3)
    expected = np.mean([((s % 7) * 0.01 + 0.1) * math.sqrt(3) for s in seeds[2:]])
    assert row['mae_mm'] == pytest.approx(expected, abs=1e-12)
    assert result.failure_rate == pytest.approx(0.2)


def test_rnn_grid_all_failed_tuple_is_invalid(monkeypatch):
    ts = sinusoid_set()
    monkeypatch.setattr(predictors, 'run_online', _fake_runs(set(run_seeds(0, 3))))
    grid = {'theta': [1.0], 'eta': [0.01], 'sigma_init': [0.02], 'L': [3], 'q': [5]}
    result = rnn_grid_search(ts, grid, SPLIT, n_runs=3, seed=0)
    assert not result.table.iloc[0]['valid']
    assert result.best is None
    assert result.failure_rate == 1.0


def test_rnn_grid_is_reproducible():
    ts = sinusoid_set()
    grid = {'theta': [1.0], 'eta': [0.02], 'sigma_init': [0.02, 0.05], 'L': [3], 'q': [6]}
    first = rnn_grid_search(ts, grid, SPLIT, n_runs=2, seed=4)
    second = rnn_grid_search(ts, grid, SPLIT, n_runs=2, seed=4)
    assert first.table.equals(second.table)
    assert first.best['sigma_init'] in (0.02, 0.05)
