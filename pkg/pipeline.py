"""
The full chain from a base breathing cycle to predicted images:

    synth -> register -> track -> predict -> warp -> evaluate

Each stage writes its artifacts under the output directory; the run ends
with ``manifest.json`` listing every artifact with its SHA-256. Wall-clock
timings go to the run ledger only, so identical configs give identical
manifests.
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, replace

import numpy as np

import results_db
from config import config_hash, database_url
from correspondence import fit_correspondence, predict_image, save_model
from errors import MotionError, StageError
from evaluation import (compare_predictors, image_prediction_report, metrics_report, write_metrics_csv,
                        write_report_json)
from optical_flow import flow_grid_search, register_sequence, registration_error
from predictors import rnn_grid_search, run_online, run_seeds, save_predictions
from synthetic import extend_sequence, make_breathing_cycle
from tracking import extract_trajectories, motion_amplitude, save_trajectories
from volume import load_volume, save_field, save_volume

logger = logging.getLogger(__name__)

STAGES = ('synth', 'register', 'track', 'predict', 'warp', 'evaluate')
MANIFEST_NAME = 'manifest.json'


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def _volume_files(path):
    """Header plus payload(s) written for one volume or field"""
    stem, _ = os.path.splitext(path)
    folder = os.path.dirname(path) or '.'
    prefix = os.path.basename(stem) + '.'
    payloads = sorted(os.path.join(folder, name) for name in os.listdir(folder)
                      if name.startswith(prefix) and name.endswith('.raw'))
    return [path] + payloads


@dataclass
class StageContext:
    config: object
    output_dir: str
    ledger_url: str = None
    run_id: int = None
    base: list = None
    frames: list = None
    dvfs: list = None
    trajectories: object = None
    predictions: object = None
    model: object = None
    registration_error: float = None
    comparison: object = None

    def path(self, *parts):
        target = os.path.join(self.output_dir, *parts)
        os.makedirs(os.path.dirname(target), exist_ok=True)
        return target


@dataclass
class PipelineResult:
    exit_code: int
    manifest: dict
    manifest_path: str


def base_cycle(cfg):
    if cfg.paths.base_volumes:
        return [load_volume(path) for path in cfg.paths.base_volumes]
    phantom = cfg.phantom
    return make_breathing_cycle(tuple(phantom.dims), blobs=list(phantom.blobs) or None,
                                amplitude=phantom.breathing_amplitude, background=phantom.background)


def stage_synth(ctx):
    cfg = ctx.config
    artifacts = []
    if cfg.paths.frames:
        ctx.frames = [load_volume(path) for path in cfg.paths.frames]
        logger.info("loaded %d frames from disk", len(ctx.frames))
    else:
        ctx.base = base_cycle(cfg)
        ctx.frames = extend_sequence(ctx.base, cfg.drift, cfg.noise)
    for k, frame in enumerate(ctx.frames, start=1):
        path = ctx.path('frames', f"frame_{k:04d}.json")
        save_volume(frame, path, dtype='f32')
        artifacts.extend(_volume_files(path))
    return artifacts


def stage_register(ctx):
    cfg = ctx.config
    artifacts = []
    flow = cfg.flow
    if cfg.flow_grid:
        result = flow_grid_search(ctx.frames, cfg.flow_grid, base_params=flow, n_workers=cfg.n_workers)
        grid_path = ctx.path('gridsearch_flow.csv')
        artifacts.extend(result.write_reports(grid_path))
        if ctx.ledger_url:
            results_db.record_flow_grid(ctx.ledger_url, result.table, ctx.run_id)
        if result.best is None:
            raise ValueError("flow grid search produced no valid parameter tuple")
        flow = flow.replace(**{name: result.best[name] for name in result.params})
        flow = flow.replace(n_layers=int(flow.n_layers), n_iter=int(flow.n_iter))

    ctx.dvfs = register_sequence(ctx.frames, flow)
    ctx.registration_error = registration_error(ctx.frames, ctx.dvfs[1:])
    for k, dvf in enumerate(ctx.dvfs, start=1):
        path = ctx.path('dvfs', f"dvf_{k:04d}.json")
        save_field(dvf, path, dtype='f32')
        artifacts.extend(_volume_files(path))
    summary_path = ctx.path('registration.json')
    write_report_json({'e_dvf': ctx.registration_error, 'flow': asdict(flow)}, summary_path)
    artifacts.append(summary_path)
    logger.info("registration error %.4g over %d frames", ctx.registration_error, len(ctx.frames))
    return artifacts


def stage_track(ctx):
    ctx.trajectories = extract_trajectories(ctx.dvfs, ctx.config.markers.points)
    path = ctx.path('trajectories.csv')
    save_trajectories(ctx.trajectories, path)
    amplitude_path = ctx.path('motion_amplitude.json')
    write_report_json({'amplitude_mm': motion_amplitude(ctx.trajectories).tolist()}, amplitude_path)
    return [path, amplitude_path]


def stage_predict(ctx):
    cfg = ctx.config
    ts = ctx.trajectories
    cfg.split.validate_for(ts.n_frames)
    artifacts = []
    rnn = replace(cfg.rnn, r=ts.r)
    if cfg.rnn_grid:
        result = rnn_grid_search(ts, cfg.rnn_grid, cfg.split, base_cfg=rnn, n_runs=cfg.n_runs,
                                 seed=rnn.seed, n_workers=cfg.n_workers)
        grid_path = ctx.path('gridsearch_rnn.csv')
        artifacts.extend(result.write_reports(grid_path))
        if ctx.ledger_url:
            results_db.record_rnn_grid(ctx.ledger_url, result.table, ctx.run_id)
        if result.best is None:
            raise ValueError("rnn grid search produced no valid parameter tuple")
        best = {name: result.best[name] for name in result.params}
        rnn = replace(rnn, L=int(best['L']), q=int(best['q']), eta=float(best['eta']),
                      theta=float(best['theta']), sigma_init=float(best['sigma_init']))

    first = replace(rnn, seed=run_seeds(rnn.seed, 1)[0])
    ctx.predictions = run_online(ts, first, cfg.split).predictions
    predictions_path = ctx.path('predictions.csv')
    save_predictions(ts, ctx.predictions, predictions_path)
    artifacts.append(predictions_path)

    ctx.comparison = compare_predictors(ts, rnn, cfg.lms, cfg.linear, cfg.split, n_runs=cfg.n_runs,
                                        seed=rnn.seed, n_workers=cfg.n_workers)
    if ctx.ledger_url:
        results_db.record_timings(ctx.ledger_url, ctx.comparison, ctx.run_id)
    metrics_path = ctx.path('metrics.csv')
    write_metrics_csv(ctx.comparison.drop(columns=['step_time_ms']), metrics_path)
    artifacts.append(metrics_path)
    return artifacts


def stage_warp(ctx):
    cfg = ctx.config
    split = cfg.split
    ts = ctx.trajectories
    ctx.model = fit_correspondence(ctx.dvfs[:split.n_train], ts.series[split.train])
    model_path = ctx.path('correspondence', 'model.json')
    save_model(ctx.model, model_path)
    artifacts = _volume_files(model_path)

    reference = ctx.frames[0]
    for t in range(split.test.start, split.test.stop):
        predicted = predict_image(reference, ctx.model, ctx.predictions[t], cfg.warp)
        path = ctx.path('predicted', f"frame_{t + 1:04d}.json")
        save_volume(predicted, path, dtype='f32')
        artifacts.extend(_volume_files(path))
    return artifacts


def stage_evaluate(ctx):
    cfg = ctx.config
    test = cfg.split.test
    ts = ctx.trajectories
    images = image_prediction_report(ctx.frames[0], ctx.frames[test], ctx.dvfs[test], ctx.model,
                                     ts.series[test], ctx.predictions[test], cfg.warp)
    rnn_report = metrics_report(ts.series[test], [ctx.predictions[test]])
    rnn_report.cross_corr = images['predicted']
    report = {
        'registration_error': ctx.registration_error,
        'rnn': rnn_report.to_dict(),
        'image_prediction': images,
        'correspondence': {'rank': ctx.model.rank, 'rank_deficient': ctx.model.rank_deficient,
                           'residual_rms_voxels': ctx.model.residual_rms},
        'comparison': ctx.comparison.drop(columns=['step_time_ms']).to_dict(orient='records'),
    }
    path = ctx.path('report.json')
    write_report_json(report, path)
    logger.info("predicted-image cross-correlation %.4f", images['predicted'])
    return [path]


STAGE_FUNCTIONS = {
    'synth': stage_synth,
    'register': stage_register,
    'track': stage_track,
    'predict': stage_predict,
    'warp': stage_warp,
    'evaluate': stage_evaluate,
}


def _manifest_entry(ctx, path):
    return {'path': os.path.relpath(path, ctx.output_dir).replace(os.sep, '/'), 'sha256': file_sha256(path)}


def run_pipeline(config, ledger_url=None, record=True, on_stage=None):
    """
    Run every stage in order. A failing stage raises StageError carrying its
    name; the ledger marks the run as failed at that stage.
    """
    config.validate()
    output_dir = config.paths.output_dir
    os.makedirs(output_dir, exist_ok=True)
    digest = config_hash(config.to_dict())

    ctx = StageContext(config, output_dir)
    if record:
        ctx.ledger_url = ledger_url or database_url(output_dir)
        results_db.init_db(ctx.ledger_url)
        results_db.update_database(ctx.ledger_url)
        ctx.run_id = results_db.record_run_start(ctx.ledger_url, digest, config.seed)

    manifest = {'config_hash': digest, 'seed': config.seed, 'stages': []}
    for name in STAGES:
        if on_stage is not None:
            on_stage(name)
        logger.info("stage %s", name)
        try:
            artifacts = STAGE_FUNCTIONS[name](ctx)
        except (MotionError, ValueError, ArithmeticError, OSError, np.linalg.LinAlgError) as e:
            if ctx.run_id is not None:
                results_db.record_run_finish(ctx.ledger_url, ctx.run_id, 'failed', failed_stage=name)
            raise StageError(name, e) from e
        manifest['stages'].append({'name': name,
                                   'artifacts': [_manifest_entry(ctx, path) for path in artifacts]})

    manifest_path = os.path.join(output_dir, MANIFEST_NAME)
    with open(manifest_path, 'w', encoding='utf-8') as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    if ctx.run_id is not None:
        results_db.record_run_finish(ctx.ledger_url, ctx.run_id, 'ok', manifest_path=manifest_path)
    logger.info("pipeline finished, manifest at %s", manifest_path)
    return PipelineResult(0, manifest, manifest_path)
