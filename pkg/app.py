#!/usr/bin/env python3
"""
Command-line entry point of the motion pipeline. Every stage is its own
subcommand so partial pipelines can be run on files from earlier stages;
``pipeline`` runs the whole chain from one run-config.
"""
from dotenv import load_dotenv

load_dotenv()
import glob
import json
import logging
import os
import sys
from dataclasses import replace
from functools import wraps

import click

import results_db
from config import database_url, load_run_config
from correspondence import WarpParams, fit_correspondence, load_model, nw_forward_warp, predict_image, save_model
from errors import EXIT_CONFIG, EXIT_IO, MotionError, StageError, exit_code_for
from evaluation import metrics_report, write_report_json
from optical_flow import DEFAULT_FLOW_GRID, flow_grid_search, register_sequence, registration_error
from pipeline import base_cycle, run_pipeline
from predictors import (DEFAULT_RNN_GRID, linear_predict, lms_run, load_predictions, no_prediction, rnn_grid_search,
                        run_online, save_predictions)
from synthetic import extend_sequence
from tracking import extract_trajectories, load_trajectories, save_trajectories
from volume import load_field, load_volume, save_field, save_volume

logger = logging.getLogger(__name__)


def handle_errors(func):
    """Report pipeline errors on one line and exit with the mapped status"""
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except StageError as e:
            click.echo(f"❌ Stage '{e.stage}' failed: {e.cause}", err=True)
            sys.exit(e.exit_code)
        except MotionError as e:
            click.echo(f"❌ {type(e).__name__}: {e}", err=True)
            sys.exit(e.exit_code)
        except OSError as e:
            click.echo(f"❌ I/O error: {e}", err=True)
            sys.exit(EXIT_IO)
        except (ValueError, ArithmeticError) as e:
            click.echo(f"❌ {type(e).__name__}: {e}", err=True)
            sys.exit(exit_code_for(e))
    return wrapper


def _expand(patterns):
    """Volume headers from explicit paths or glob patterns, in sorted order"""
    paths = []
    for pattern in patterns:
        matches = sorted(glob.glob(pattern))
        paths.extend(matches if matches else [pattern])
    return paths


def _output_dir(cfg, out):
    target = out or cfg.paths.output_dir
    os.makedirs(target, exist_ok=True)
    return target


config_option = click.option('--config', '-c', 'config_path', type=click.Path(dir_okay=False),
                             required=True, help='Run-config JSON')


@click.group()
@click.option('--verbose', '-v', is_flag=True, help='Debug logging')
def cli(verbose):
    """Volumetric motion registration, marker prediction and image prediction"""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')


@cli.command()
@config_option
@click.option('--out', '-o', type=click.Path(file_okay=False), help='Output directory')
@handle_errors
def synth(config_path, out):
    """Extend the base cycle into the drifting, noisy frame sequence"""
    cfg = load_run_config(config_path)
    out = _output_dir(cfg, out)
    click.echo(f"🚀 Synthesising {cfg.drift.n_frames} frames")
    frames = extend_sequence(base_cycle(cfg), cfg.drift, cfg.noise)
    for k, frame in enumerate(frames, start=1):
        save_volume(frame, os.path.join(out, 'frames', f"frame_{k:04d}.json"))
    click.echo(f"✅ Wrote {len(frames)} frames to {os.path.join(out, 'frames')}")


@cli.command()
@config_option
@click.argument('frames', nargs=-1, required=True)
@click.option('--out', '-o', type=click.Path(file_okay=False), help='Output directory')
@handle_errors
def register(config_path, frames, out):
    """Register every frame to the first one"""
    cfg = load_run_config(config_path)
    out = _output_dir(cfg, out)
    volumes = [load_volume(path) for path in _expand(frames)]
    click.echo(f"📊 Registering {len(volumes)} frames")
    dvfs = register_sequence(volumes, cfg.flow)
    for k, dvf in enumerate(dvfs, start=1):
        save_field(dvf, os.path.join(out, 'dvfs', f"dvf_{k:04d}.json"))
    error = registration_error(volumes, dvfs[1:])
    click.echo(f"✅ Registration error e_DVF = {error:.6g}")


@cli.command('gridsearch-flow')
@config_option
@click.argument('frames', nargs=-1, required=True)
@click.option('--out', '-o', type=click.Path(dir_okay=False), help='Result CSV')
@handle_errors
def gridsearch_flow(config_path, frames, out):
    """Registration error over every flow parameter tuple"""
    cfg = load_run_config(config_path)
    volumes = [load_volume(path) for path in _expand(frames)]
    grid = cfg.flow_grid or DEFAULT_FLOW_GRID
    click.echo(f"🚀 Flow grid search on {len(volumes)} frames")
    result = flow_grid_search(volumes, grid, base_params=cfg.flow, n_workers=cfg.n_workers)
    out = out or os.path.join(_output_dir(cfg, None), 'gridsearch_flow.csv')
    result.write_reports(out)
    ledger = database_url(_output_dir(cfg, None))
    results_db.init_db(ledger)
    results_db.record_flow_grid(ledger, result.table)
    if result.best is None:
        click.echo("⚠️ No valid parameter tuple")
    else:
        click.echo(f"✅ Best tuple {result.best}")


@cli.command()
@config_option
@click.argument('dvfs', nargs=-1, required=True)
@click.option('--out', '-o', type=click.Path(dir_okay=False), help='Trajectory CSV')
@handle_errors
def track(config_path, dvfs, out):
    """Sample the displacement fields at the marker points"""
    cfg = load_run_config(config_path)
    fields = [load_field(path) for path in _expand(dvfs)]
    ts = extract_trajectories(fields, cfg.markers.points)
    out = out or os.path.join(_output_dir(cfg, None), 'trajectories.csv')
    save_trajectories(ts, out)
    click.echo(f"✅ {ts.n_frames} frames x {ts.r} markers written to {out}")


def _load_series(cfg, trajectories):
    return load_trajectories(trajectories, points=cfg.markers.points)


@cli.command()
@config_option
@click.argument('trajectories', type=click.Path(exists=True, dir_okay=False))
@click.option('--method', type=click.Choice(['rnn', 'lms', 'linear', 'none']), default='rnn', show_default=True)
@click.option('--out', '-o', type=click.Path(dir_okay=False), help='Predictions CSV')
@handle_errors
def predict(config_path, trajectories, method, out):
    """Forecast each marker one sampling interval ahead"""
    cfg = load_run_config(config_path)
    ts = _load_series(cfg, trajectories)
    cfg.split.validate_for(ts.n_frames)
    click.echo(f"📊 Predicting {ts.n_frames} rows with {method}")
    if method == 'rnn':
        result = run_online(ts, replace(cfg.rnn, r=ts.r), cfg.split)
    elif method == 'lms':
        result = lms_run(ts, cfg.lms.L, cfg.lms.eta, cfg.split)
    elif method == 'linear':
        result = linear_predict(ts, cfg.linear.L, cfg.split)
    else:
        result = no_prediction(ts)
    out = out or os.path.join(_output_dir(cfg, None), 'predictions.csv')
    save_predictions(ts, result.predictions, out)
    click.echo(f"✅ Predictions written to {out} ({1e3 * result.step_time_s:.3f} ms/step)")


@cli.command('gridsearch-rnn')
@config_option
@click.argument('trajectories', type=click.Path(exists=True, dir_okay=False))
@click.option('--out', '-o', type=click.Path(dir_okay=False), help='Result CSV')
@handle_errors
def gridsearch_rnn(config_path, trajectories, out):
    """Validation MAE of the RNN over every hyper-parameter tuple"""
    cfg = load_run_config(config_path)
    ts = _load_series(cfg, trajectories)
    grid = cfg.rnn_grid or DEFAULT_RNN_GRID
    click.echo(f"🚀 RNN grid search, {cfg.n_runs} runs per tuple")
    result = rnn_grid_search(ts, grid, cfg.split, base_cfg=replace(cfg.rnn, r=ts.r), n_runs=cfg.n_runs,
                             seed=cfg.rnn.seed, n_workers=cfg.n_workers)
    out = out or os.path.join(_output_dir(cfg, None), 'gridsearch_rnn.csv')
    result.write_reports(out)
    ledger = database_url(_output_dir(cfg, None))
    results_db.init_db(ledger)
    results_db.record_rnn_grid(ledger, result.table)
    if result.failure_rate > 0:
        click.echo(f"⚠️ Numerical failure rate {100 * result.failure_rate:.4f}%")
    if result.best is None:
        click.echo("⚠️ No valid parameter tuple")
    else:
        click.echo(f"✅ Best tuple {result.best}")


@cli.command()
@click.argument('src', type=click.Path(exists=True, dir_okay=False))
@click.argument('dvf', type=click.Path(exists=True, dir_okay=False))
@click.option('--out', '-o', type=click.Path(dir_okay=False), required=True, help='Warped volume header')
@click.option('--sigma-w', type=float, default=WarpParams.sigma_w, show_default=True)
@click.option('--h', 'h', type=int, default=WarpParams.h, show_default=True)
@click.option('--fill-value', type=float, default=WarpParams.fill_value, show_default=True)
@handle_errors
def warp(src, dvf, out, sigma_w, h, fill_value):
    """Forward-warp a volume by a displacement field"""
    params = WarpParams(sigma_w, h, fill_value)
    params.validate()
    warped = nw_forward_warp(load_volume(src), load_field(dvf), params)
    save_volume(warped, out)
    click.echo(f"✅ Warped volume written to {out}")


@cli.command('fit-correspondence')
@config_option
@click.argument('trajectories', type=click.Path(exists=True, dir_okay=False))
@click.argument('dvfs', nargs=-1, required=True)
@click.option('--out', '-o', type=click.Path(dir_okay=False), required=True, help='Model header')
@handle_errors
def fit_correspondence_command(config_path, trajectories, dvfs, out):
    """Fit the marker-to-field correspondence on the training frames"""
    cfg = load_run_config(config_path)
    ts = _load_series(cfg, trajectories)
    paths = _expand(dvfs)[:cfg.split.n_train]
    model = fit_correspondence((load_field(path) for path in paths), ts.series[:len(paths)])
    save_model(model, out)
    if model.rank_deficient:
        click.echo(f"⚠️ Marker design is rank deficient (rank {model.rank} < {model.r})")
    click.echo(f"✅ Correspondence model written to {out}")


@cli.command('predict-image')
@config_option
@click.argument('src', type=click.Path(exists=True, dir_okay=False))
@click.argument('model', type=click.Path(exists=True, dir_okay=False))
@click.argument('predictions', type=click.Path(exists=True, dir_okay=False))
@click.option('--out', '-o', type=click.Path(file_okay=False), help='Output directory')
@handle_errors
def predict_image_command(config_path, src, model, predictions, out):
    """Warp the reference volume by the field of every predicted marker row"""
    cfg = load_run_config(config_path)
    reference = load_volume(src)
    correspondence = load_model(model)
    t_index, predicted, _ = load_predictions(predictions)
    out = os.path.join(_output_dir(cfg, out), 'predicted')
    for t, row in zip(t_index, predicted):
        save_volume(predict_image(reference, correspondence, row, cfg.warp),
                    os.path.join(out, f"frame_{int(t) + 1:04d}.json"))
    click.echo(f"✅ {len(t_index)} predicted volumes written to {out}")


@cli.command()
@click.argument('predictions', type=click.Path(exists=True, dir_okay=False))
@click.option('--start', type=int, default=None, help='First time index to score (default: all rows)')
@click.option('--out', '-o', type=click.Path(dir_okay=False), help='Report JSON')
@handle_errors
def evaluate(predictions, start, out):
    """Prediction metrics of a predictions CSV"""
    t_index, predicted, true = load_predictions(predictions)
    if start is not None:
        keep = t_index >= start
        predicted, true = predicted[keep], true[keep]
    report = metrics_report(true, [predicted])
    if out:
        write_report_json(report, out)
    click.echo(json.dumps(report.to_dict(), indent=2, default=float))


@cli.command('pipeline')
@config_option
@handle_errors
def pipeline_command(config_path):
    """Run every stage from the run-config and write the manifest"""
    cfg = load_run_config(config_path)
    click.echo(f"🚀 Running pipeline into {cfg.paths.output_dir}")
    result = run_pipeline(cfg, on_stage=lambda name: click.echo(f"📊 Stage {name}"))
    n_files = sum(len(stage['artifacts']) for stage in result.manifest['stages'])
    click.echo(f"✅ {len(result.manifest['stages'])} stages, {n_files} artifacts, manifest {result.manifest_path}")


def main():
    try:
        cli.main(standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("❌ Aborted", err=True)
        sys.exit(EXIT_CONFIG)
    except click.ClickException as e:
        e.show()
        sys.exit(EXIT_CONFIG)


if __name__ == '__main__':
    main()
