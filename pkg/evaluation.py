"""
Prediction and image metrics, confidence intervals over seeded runs, and
the predictor comparison table.

Marker series are (N, 3r) matrices in mm; every metric works on the 3D
Euclidean error of each marker at each frame.
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, replace

import numpy as np
import pandas as pd
from scipy import stats

import gridsearch
from correspondence import nw_forward_warp, reconstruct_dvf
from errors import DegenerateSignalError, EmptyInputError, LengthMismatchError, NumericalFailure
from predictors import linear_predict, lms_run, no_prediction, run_online, run_seeds

logger = logging.getLogger(__name__)

PREDICTORS = ('rnn', 'linear', 'lms', 'no_prediction')
METRIC_COLUMNS = ['e_max', 'e_rms', 'e_nrms', 'jitter', 'e_mae']


def _per_marker(series):
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 1:
        series = series[None, :]
    if series.shape[-1] % 3:
        raise ValueError(f"marker series needs 3r columns, got {series.shape[-1]}")
    return series.reshape(series.shape[0], -1, 3)


def _errors(true, pred):
    true, pred = _per_marker(true), _per_marker(pred)
    if true.shape != pred.shape:
        raise LengthMismatchError(f"true and predicted series differ in shape: {true.shape} vs {pred.shape}")
    if true.size == 0:
        raise EmptyInputError("no frames to evaluate")
    return np.linalg.norm(true - pred, axis=-1)


def mae(true, pred):
    return float(np.mean(_errors(true, pred)))


def max_error(true, pred):
    return float(np.max(_errors(true, pred)))


def rmse(true, pred):
    return float(math.sqrt(np.mean(_errors(true, pred) ** 2)))


def nrmse(true, pred):
    """Error energy over the energy of the true series about each marker's mean position"""
    errors = _errors(true, pred)
    markers = _per_marker(true)
    spread = float(np.sum((markers - markers.mean(axis=0)) ** 2))
    if not spread > 0:
        raise DegenerateSignalError("nRMSE is undefined for a constant true series")
    return float(math.sqrt(np.sum(errors ** 2) / spread))


def jitter(pred):
    markers = _per_marker(pred)
    if markers.shape[0] < 2:
        raise EmptyInputError("jitter needs at least 2 frames")
    return float(np.mean(np.linalg.norm(np.diff(markers, axis=0), axis=-1)))


@dataclass(frozen=True)
class Interval:
    point: float
    low: float
    high: float
    n: int


def confidence_interval(values, level=0.95):
    """Mean +- z * s / sqrt(n) with the sample (n-1) standard deviation"""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise EmptyInputError(f"a confidence interval needs at least 2 successful runs, got {values.size}")
    z = 1.96 if level == 0.95 else float(stats.norm.ppf(0.5 + level / 2))
    point = float(values.mean())
    half = z * float(values.std(ddof=1)) / math.sqrt(values.size)
    return Interval(point, point - half, point + half, int(values.size))


def cross_correlation(I, J):
    a = np.asarray(getattr(I, 'data', I), dtype=np.float64).ravel()
    b = np.asarray(getattr(J, 'data', J), dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise LengthMismatchError(f"images differ in size: {a.size} vs {b.size}")
    a = a - a.mean()
    b = b - b.mean()
    denominator = math.sqrt(float(a @ a) * float(b @ b))
    if not denominator > 0:
        raise DegenerateSignalError("cross-correlation of a constant image is undefined")
    return float(a @ b) / denominator


@dataclass
class MetricsReport:
    e_max: float
    e_rms: float
    e_nrms: float
    jitter: float
    e_mae: float
    ci_max: Interval = None
    ci_rms: Interval = None
    jitter_ci: Interval = None
    n_runs_used: int = 1
    cross_corr: float = None

    def to_dict(self):
        return asdict(self)


def _point_metrics(true, pred):
    return {'e_max': max_error(true, pred), 'e_rms': rmse(true, pred), 'e_nrms': nrmse(true, pred),
            'jitter': jitter(pred), 'e_mae': mae(true, pred)}


def metrics_report(true, runs):
    """Metrics averaged over the given prediction runs, with intervals once there are 2 or more"""
    runs = list(runs)
    if not runs:
        raise EmptyInputError("no successful runs to report on")
    per_run = pd.DataFrame([_point_metrics(true, pred) for pred in runs], columns=METRIC_COLUMNS)
    means = per_run.mean()
    report = MetricsReport(**{name: float(means[name]) for name in METRIC_COLUMNS}, n_runs_used=len(runs))
    if len(runs) >= 2:
        report.ci_max = confidence_interval(per_run['e_max'])
        report.ci_rms = confidence_interval(per_run['e_rms'])
        report.jitter_ci = confidence_interval(per_run['jitter'])
    return report


def _rnn_comparison_run(args):
    ts, cfg, split = args
    try:
        result = run_online(ts, cfg, split)
    except NumericalFailure as e:
        logger.info("rnn run with seed %d failed: %s", cfg.seed, e)
        return None, float('nan')
    return result.predictions[split.test], result.step_time_s


def _row(name, report, step_time_s, valid=True):
    row = {'predictor': name, 'valid': valid, 'step_time_ms': 1e3 * step_time_s,
           'n_runs_used': report.n_runs_used if report else 0}
    for column in METRIC_COLUMNS:
        row[column] = getattr(report, column) if report else float('nan')
    for label, attr in (('ci_max', 'ci_max'), ('ci_rms', 'ci_rms'), ('jitter_ci', 'jitter_ci')):
        interval = getattr(report, attr) if report else None
        row[f"{label}_low"] = interval.low if interval else float('nan')
        row[f"{label}_high"] = interval.high if interval else float('nan')
    return row


def compare_predictors(ts, rnn_cfg, lms_cfg, linear_cfg, split, n_runs=10, seed=0, n_workers=1):
    """
    Run every predictor on the same series and split and score it on the
    test rows. The RNN is run once per seed; a table row with no successful
    run is marked invalid.
    """
    split.validate_for(ts.n_frames)
    truth = ts.series[split.test]
    rows = []

    jobs = [(ts, replace(rnn_cfg, r=ts.r, seed=s), split) for s in run_seeds(seed, n_runs)]
    outcomes = gridsearch.parallel_map(_rnn_comparison_run, jobs, n_workers)
    succeeded = [(pred, t) for pred, t in outcomes if pred is not None]
    if succeeded:
        report = metrics_report(truth, [pred for pred, _ in succeeded])
        rows.append(_row('rnn', report, float(np.mean([t for _, t in succeeded]))))
    else:
        logger.warning("all %d rnn runs failed", n_runs)
        rows.append(_row('rnn', None, float('nan'), valid=False))

    linear = linear_predict(ts, linear_cfg.L, split)
    rows.append(_row('linear', metrics_report(truth, [linear.predictions[split.test]]), linear.step_time_s))
    lms = lms_run(ts, lms_cfg.L, lms_cfg.eta, split)
    rows.append(_row('lms', metrics_report(truth, [lms.predictions[split.test]]), lms.step_time_s))
    baseline = no_prediction(ts)
    rows.append(_row('no_prediction', metrics_report(truth, [baseline.predictions[split.test]]), 0.0))

    table = pd.DataFrame(rows)
    first = ['predictor'] + METRIC_COLUMNS
    table = table[first + [c for c in table.columns if c not in first]]
    logger.info("compared %d predictors on %d test rows", len(table), truth.shape[0])
    return table


def image_prediction_report(reference, true_frames, registration_dvfs, model, true_rows, predicted_rows, wp):
    """
    Mean cross-correlation with the true frames of the reference image
    forward-warped by the registration field, by the field rebuilt from the
    observed marker rows, and by the field rebuilt from the predicted rows.
    """
    true_frames = list(true_frames)
    registration_dvfs = list(registration_dvfs)
    true_rows = np.asarray(true_rows)
    predicted_rows = np.asarray(predicted_rows)
    if not (len(true_frames) == len(registration_dvfs) == len(true_rows) == len(predicted_rows)):
        raise LengthMismatchError("frames, fields and marker rows must cover the same test frames")
    if not true_frames:
        raise EmptyInputError("no test frames for image prediction")

    scores = {'registration': [], 'markers': [], 'predicted': []}
    for frame, dvf, observed, predicted in zip(true_frames, registration_dvfs, true_rows, predicted_rows):
        scores['registration'].append(cross_correlation(nw_forward_warp(reference, dvf, wp), frame))
        scores['markers'].append(cross_correlation(
            nw_forward_warp(reference, reconstruct_dvf(model, observed), wp), frame))
        scores['predicted'].append(cross_correlation(
            nw_forward_warp(reference, reconstruct_dvf(model, predicted), wp), frame))
    summary = {name: float(np.mean(values)) for name, values in scores.items()}
    summary['n_frames'] = len(true_frames)
    return summary


def write_metrics_csv(table, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    table.to_csv(path, index=False, float_format='%.10g')


def write_report_json(report, path):
    payload = report.to_dict() if hasattr(report, 'to_dict') else report
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)
