"""
Online prediction of marker positions one sampling interval ahead.

The recurrent network is trained by real-time recurrent learning (RTRL)
with joint gradient-norm clipping. LMS, an offline least-squares linear
predictor and the no-prediction baseline are the reference methods.

Inputs follow one convention for every online method: the input vector at
step n is a leading bias 1 followed by the normalised rows n..n+L-1 of the
series, oldest first, markers and axes in column order.
"""

import logging
import math
import time
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

import gridsearch
from config import substream, substream_seed
from errors import ConfigError, NumericalFailure
from tracking import apply_norm, fit_norm, invert_norm

logger = logging.getLogger(__name__)

RNN_PARAMS = ('theta', 'eta', 'sigma_init', 'L', 'q')

DEFAULT_RNN_GRID = {
    'theta': [0.5, 1.0, 2.0],
    'eta': [0.01, 0.02, 0.05, 0.10],
    'sigma_init': [0.01, 0.02, 0.05, 0.10],
    'L': [10, 25, 40],
    'q': [10, 25, 40, 55, 100, 145, 200, 250],
}


@dataclass(frozen=True)
class RnnConfig:
    L: int = 10
    r: int = 3
    q: int = 25
    eta: float = 0.01
    theta: float = 1.0
    sigma_init: float = 0.02
    seed: int = 0

    @property
    def m(self):
        return 3 * self.r * self.L

    @property
    def p(self):
        return 3 * self.r

    def validate(self):
        if self.L < 1 or self.q < 1 or self.r < 1:
            raise ConfigError(f"rnn.L, rnn.q and rnn.r must be >= 1 (L={self.L}, q={self.q}, r={self.r})")
        if not self.eta > 0:
            raise ConfigError(f"rnn.eta must be > 0, got {self.eta}")
        if not self.theta > 0:
            raise ConfigError(f"rnn.theta must be > 0, got {self.theta}")
        if not self.sigma_init > 0:
            raise ConfigError(f"rnn.sigma_init must be > 0, got {self.sigma_init}")


@dataclass(eq=False)
class RnnRtrlState:
    """
    ``Lambda[j]`` is the q x (q+m+1) sensitivity of the hidden state to the
    incoming weights of hidden unit j, i.e. row j of [W_a | W_b].
    """
    W_a: np.ndarray
    W_b: np.ndarray
    W_c: np.ndarray
    x: np.ndarray
    Lambda: np.ndarray
    n: int = 0


@dataclass(eq=False)
class StepInfo:
    y: np.ndarray
    e: np.ndarray
    loss: float
    delta_ab: np.ndarray
    delta_c: np.ndarray
    kappa: float
    clipped: bool


def rnn_init(cfg):
    rng = substream(cfg.seed, 'rnn-init')
    q, m, p = cfg.q, cfg.m, cfg.p
    return RnnRtrlState(
        W_a=rng.normal(0.0, cfg.sigma_init, size=(q, q)),
        W_b=rng.normal(0.0, cfg.sigma_init, size=(q, m + 1)),
        W_c=rng.normal(0.0, cfg.sigma_init, size=(p, q)),
        x=np.zeros(q),
        Lambda=np.zeros((q, q, q + m + 1)),
        n=0,
    )


def clip_joint_gradient(deltas, theta):
    """Scale all blocks by theta/kappa when their joint Frobenius norm kappa exceeds theta"""
    kappa = math.sqrt(sum(float(np.sum(np.square(d))) for d in deltas))
    if kappa > theta:
        scale = theta / kappa
        return [d * scale for d in deltas], kappa
    return list(deltas), kappa


def rnn_step(state, u, d, eta, theta):
    """One learning-and-prediction iteration; returns (y, new_state, info)"""
    q = state.W_a.shape[0]
    u = np.asarray(u, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)

    y = state.W_c @ state.x
    e = d - y

    # Row j of delta_ab is Lambda_j^T W_c^T e
    feedback = state.W_c.T @ e
    delta_ab = np.einsum('jik,i->jk', state.Lambda, feedback)
    delta_c = np.outer(e, state.x)
    (delta_ab, delta_c), kappa = clip_joint_gradient([delta_ab, delta_c], theta)

    W_c = state.W_c + eta * delta_c
    xi = np.concatenate([state.x, u])
    pre_activation = state.W_a @ state.x + state.W_b @ u
    activation = np.tanh(pre_activation)
    phi_prime = 1.0 - activation ** 2

    W_ab = np.hstack([state.W_a, state.W_b]) + eta * delta_ab
    immediate = np.zeros_like(state.Lambda)
    immediate[np.arange(q), np.arange(q), :] = xi
    Lambda = phi_prime[None, :, None] * (np.matmul(state.W_a, state.Lambda) + immediate)

    new_state = RnnRtrlState(W_a=W_ab[:, :q], W_b=W_ab[:, q:], W_c=W_c, x=activation,
                             Lambda=Lambda, n=state.n + 1)
    for name in ('W_a', 'W_b', 'W_c', 'x', 'Lambda'):
        if not np.all(np.isfinite(getattr(new_state, name))):
            raise NumericalFailure(state.n, f"non-finite {name}")
    if not np.all(np.isfinite(y)):
        raise NumericalFailure(state.n, "non-finite prediction")

    info = StepInfo(y=y, e=e, loss=0.5 * float(e @ e), delta_ab=delta_ab, delta_c=delta_c,
                    kappa=kappa, clipped=kappa > theta)
    return y, new_state, info


def history_matrix(series, L):
    """Row n = [1, rows n..n+L-1 flattened], for n = 0..N-L"""
    series = np.asarray(series, dtype=np.float64)
    n_inputs = series.shape[0] - L + 1
    windows = np.stack([series[n:n + L].ravel() for n in range(n_inputs)])
    return np.hstack([np.ones((n_inputs, 1)), windows])


@dataclass(eq=False)
class OnlineResult:
    """
    ``predictions[k]`` is the forecast of row k in mm (NaN where none was
    made); ``loss[k]`` is the instantaneous loss of the step that predicted
    row k.
    """
    predictions: np.ndarray
    loss: np.ndarray
    step_time_s: float
    state: object = None
    clipped_steps: int = 0


def _check_length(ts, L):
    if ts.n_frames < L + 1:
        raise ConfigError(f"series of {ts.n_frames} rows is too short for history length {L}")


def run_online(ts, cfg, split):
    """
    Feed the whole series through the RTRL network. The step that feeds
    rows n..n+L-1 first predicts row n+L-1 from the hidden state carried
    over from the previous input, so every forecast only uses earlier rows.
    """
    cfg.validate()
    if cfg.r != ts.r:
        raise ConfigError(f"rnn.r={cfg.r} but the series has {ts.r} markers")
    _check_length(ts, cfg.L)
    stats = fit_norm(ts, split)
    normed = apply_norm(stats, ts.series)
    inputs = history_matrix(normed, cfg.L)

    state = rnn_init(cfg)
    n_rows = ts.n_frames
    predictions = np.full((n_rows, cfg.p), np.nan)
    loss = np.full(n_rows, np.nan)
    clipped = 0
    elapsed = 0.0
    for n in range(inputs.shape[0]):
        target_row = n + cfg.L - 1
        started = time.perf_counter()
        y, state, info = rnn_step(state, inputs[n], normed[target_row], cfg.eta, cfg.theta)
        elapsed += time.perf_counter() - started
        clipped += info.clipped
        if n > 0:
            predictions[target_row] = y
            loss[target_row] = info.loss

    predictions[cfg.L:] = invert_norm(stats, predictions[cfg.L:])
    return OnlineResult(predictions, loss, elapsed / inputs.shape[0], state, clipped)


@dataclass(eq=False)
class LmsState:
    W: np.ndarray
    eta_lms: float
    L_lms: int


def lms_step(W, u, d, eta):
    y = W @ u
    return y, W + eta * np.outer(d - y, u)


def lms_run(ts, L_lms, eta_lms, split):
    """y_n = W_n u_n predicts row n+L; W_{n+1} = W_n + eta (d_n - y_n) u_n^T"""
    _check_length(ts, L_lms)
    stats = fit_norm(ts, split)
    normed = apply_norm(stats, ts.series)
    inputs = history_matrix(normed, L_lms)[:-1]

    state = LmsState(np.zeros((normed.shape[1], inputs.shape[1])), eta_lms, L_lms)
    predictions = np.full(normed.shape, np.nan)
    elapsed = 0.0
    for n, u in enumerate(inputs):
        started = time.perf_counter()
        y, state.W = lms_step(state.W, u, normed[n + L_lms], eta_lms)
        elapsed += time.perf_counter() - started
        if not np.all(np.isfinite(state.W)):
            raise NumericalFailure(n, "non-finite LMS weights")
        predictions[n + L_lms] = y

    predictions[L_lms:] = invert_norm(stats, predictions[L_lms:])
    return OnlineResult(predictions, np.full(normed.shape[0], np.nan),
                        elapsed / max(len(inputs), 1), state)


@dataclass(eq=False)
class LinearFit:
    """``coefficients[c]`` = (a_0, a_1..a_L) for column c, a_k weighting the sample k steps back"""
    coefficients: np.ndarray
    ranks: np.ndarray
    rank_deficient: bool


def fit_linear(ts, L_lin, split):
    n_train = split.n_train
    if n_train < L_lin + 2:
        raise ConfigError(f"linear predictor needs at least {L_lin + 2} training rows, got {n_train}")
    train = ts.series[:n_train]
    n_samples = n_train - L_lin
    coefficients = np.empty((train.shape[1], L_lin + 1))
    ranks = np.empty(train.shape[1], dtype=int)
    for c in range(train.shape[1]):
        design = np.ones((n_samples, L_lin + 1))
        for k in range(1, L_lin + 1):
            design[:, k] = train[L_lin - k:n_train - k, c]
        target = train[L_lin:, c]
        solution, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
        coefficients[c] = solution
        ranks[c] = rank
    deficient = bool(np.any(ranks < L_lin + 1))
    if deficient:
        logger.warning("linear predictor: rank-deficient normal system, using the minimum-norm solution")
    return LinearFit(coefficients, ranks, deficient)


def linear_predict(ts, L_lin, split, fit=None):
    """
    Autoregressive forecast of every row from the L_lin true samples before
    it. Coefficients come from the training rows only, so rows past the
    training split are out-of-sample.
    """
    fit = fit or fit_linear(ts, L_lin, split)
    predictions = np.full(ts.series.shape, np.nan)
    started = time.perf_counter()
    for row in range(L_lin, ts.n_frames):
        past = ts.series[row - L_lin:row][::-1]
        predictions[row] = fit.coefficients[:, 0] + np.einsum('ck,kc->c', fit.coefficients[:, 1:], past)
    step_time = (time.perf_counter() - started) / max(ts.n_frames - L_lin, 1)
    return OnlineResult(predictions, np.full(ts.n_frames, np.nan), step_time, fit)


def no_prediction(ts):
    predictions = np.full(ts.series.shape, np.nan)
    predictions[1:] = ts.series[:-1]
    return OnlineResult(predictions, np.full(ts.n_frames, np.nan), 0.0)


def _rnn_grid_run(args):
    ts, cfg, split = args
    from evaluation import mae
    try:
        result = run_online(ts, cfg, split)
    except NumericalFailure as e:
        logger.info("run failed (seed %d): %s", cfg.seed, e)
        return float('nan')
    rows = split.val
    return mae(ts.series[rows], result.predictions[rows])


def run_seeds(seed, n_runs):
    return [substream_seed(seed, 'rnn-run', run) for run in range(n_runs)]


def rnn_grid_search(ts, grid, split, base_cfg=None, n_runs=10, seed=0, n_workers=1):
    """
    Every tuple is run with the same n_runs seeds. The validation MAE is
    averaged over the runs without numerical failure; a tuple whose runs
    all failed is invalid and excluded from the argmin and marginals.
    """
    base = base_cfg or RnnConfig(r=ts.r)
    combos = gridsearch.expand_grid(grid, RNN_PARAMS)
    seeds = run_seeds(seed, n_runs)
    jobs = []
    for combo in combos:
        for run_seed in seeds:
            cfg = replace(base, r=ts.r, seed=run_seed, **combo)
            cfg.validate()
            jobs.append((ts, cfg, split))
    maes = np.asarray(gridsearch.parallel_map(_rnn_grid_run, jobs, n_workers)).reshape(len(combos), n_runs)

    rows = []
    for combo, run_maes in zip(combos, maes):
        ok = np.isfinite(run_maes)
        rows.append(dict(combo, mae_mm=float(run_maes[ok].mean()) if ok.any() else float('nan'),
                         n_failed=int((~ok).sum()), valid=bool(ok.any())))
    table = pd.DataFrame(rows, columns=list(RNN_PARAMS) + ['mae_mm', 'n_failed', 'valid'])
    total_failed = int(table['n_failed'].sum())
    failure_rate = total_failed / float(len(combos) * n_runs)
    logger.info("rnn grid search: %d tuples x %d runs, %d numerical failures (%.4f%%)",
                len(combos), n_runs, total_failed, 100 * failure_rate)
    return gridsearch.summarize(table, RNN_PARAMS, 'mae_mm', failure_rate)


PREDICTION_COLUMNS = ['t_index', 'marker', 'axis', 'y_pred_mm', 'y_true_mm']


def predictions_frame(ts, predictions, rows=None):
    """Long-format table of forecast against truth, one line per marker axis"""
    rows = range(ts.n_frames) if rows is None else rows
    records = []
    for t in rows:
        if not np.all(np.isfinite(predictions[t])):
            continue
        for column in range(ts.series.shape[1]):
            records.append((t, column // 3, 'xyz'[column % 3], predictions[t, column], ts.series[t, column]))
    return pd.DataFrame.from_records(records, columns=PREDICTION_COLUMNS)


def save_predictions(ts, predictions, path, rows=None):
    frame = predictions_frame(ts, predictions, rows)
    frame.to_csv(path, index=False, float_format='%.17g')
    logger.info("wrote %d prediction rows to %s", len(frame), path)


def load_predictions(path):
    """Returns (t_index array, predicted (n, 3r), true (n, 3r))"""
    frame = pd.read_csv(path)
    missing = set(PREDICTION_COLUMNS) - set(frame.columns)
    if missing:
        raise ValueError(f"{path}: predictions CSV missing columns {sorted(missing)}")
    frame['axis_index'] = frame['axis'].map({'x': 0, 'y': 1, 'z': 2})
    frame = frame.sort_values(['t_index', 'marker', 'axis_index'])
    t_index = frame['t_index'].unique()
    n_columns = len(frame) // len(t_index)
    if len(frame) != n_columns * len(t_index):
        raise ValueError(f"{path}: every time index needs the same number of marker axes")
    predicted = frame['y_pred_mm'].to_numpy().reshape(len(t_index), n_columns)
    true = frame['y_true_mm'].to_numpy().reshape(len(t_index), n_columns)
    return t_index, predicted, true
