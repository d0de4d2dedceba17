#!/usr/bin/env python3
"""
Write a small demo data set: a ten-phase phantom breathing cycle on disk
and a run-config that points at it, sized so the whole pipeline finishes
in a few minutes.
"""

import json
import os
import sys

import click

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from synthetic import make_breathing_cycle
from volume import save_volume


def demo_config(base_paths, output_dir, n_frames=60):
    return {
        'paths': {'output_dir': output_dir, 'base_volumes': base_paths},
        'flow': {'sigma_init': 0.5, 'sigma_sub': 0.5, 'sigma_lk': 2.0, 'n_layers': 2, 'n_iter': 3},
        'rnn': {'L': 3, 'q': 10, 'eta': 0.02, 'theta': 1.0, 'sigma_init': 0.02},
        'lms': {'L': 3, 'eta': 0.01},
        'linear': {'L': 3},
        'drift': {'preset': 'seq1', 'n_frames': n_frames},
        'noise': {'lam': 1000.0},
        'split': {'n_train': 40, 'n_val': 10, 'n_test': 10},
        'markers': {'points': [[8, 8, 8], [5, 10, 6], [10, 5, 9]]},
        'warp': {'sigma_w': 0.5, 'h': 3},
        'seed': 7,
        'n_runs': 3,
    }


@click.command()
@click.option('--out', '-o', default='demo_data', show_default=True, type=click.Path(file_okay=False))
@click.option('--dims', nargs=3, type=int, default=(16, 16, 16), show_default=True)
@click.option('--frames', 'n_frames', type=int, default=60, show_default=True)
def create_test_data(out, dims, n_frames):
    """Phantom base cycle plus run_config.json"""
    click.echo(f"🚀 Creating demo base cycle {dims[0]}x{dims[1]}x{dims[2]}")
    paths = []
    for phase, volume in enumerate(make_breathing_cycle(tuple(dims), amplitude=(0.4, 0.3, 1.5)), start=1):
        path = os.path.join(out, 'base', f"phase_{phase:02d}.json")
        save_volume(volume, path, dtype='f32')
        paths.append(path)
    click.echo(f"✅ Wrote {len(paths)} phase volumes")

    config_path = os.path.join(out, 'run_config.json')
    with open(config_path, 'w', encoding='utf-8') as fh:
        json.dump(demo_config(paths, os.path.join(out, 'output'), n_frames), fh, indent=2)
    click.echo(f"✅ Run-config written to {config_path}")
    click.echo(f"   Run it with: python app.py pipeline -c {config_path}")


if __name__ == '__main__':
    create_test_data()
