#!/usr/bin/env python3
"""
Check a finished run: every artifact in the manifest exists and still has
its recorded hash, and the ledger lists the most recent runs.
"""

import json
import os
import sys

import click

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import results_db
from config import database_url
from pipeline import MANIFEST_NAME, file_sha256


def verify_manifest(output_dir):
    """Returns (manifest, checked, problems) for the manifest under output_dir"""
    with open(os.path.join(output_dir, MANIFEST_NAME), 'r', encoding='utf-8') as fh:
        manifest = json.load(fh)
    checked, problems = 0, []
    for stage in manifest['stages']:
        for artifact in stage['artifacts']:
            path = os.path.join(output_dir, artifact['path'])
            checked += 1
            if not os.path.exists(path):
                problems.append(f"{stage['name']}: missing {artifact['path']}")
            elif file_sha256(path) != artifact['sha256']:
                problems.append(f"{stage['name']}: hash changed for {artifact['path']}")
    return manifest, checked, problems


@click.command()
@click.argument('output_dir', type=click.Path(exists=True, file_okay=False))
def verify_data(output_dir):
    """Summarise the manifest and ledger of OUTPUT_DIR"""
    manifest, checked, problems = verify_manifest(output_dir)
    click.echo(f"Found {len(manifest['stages'])} stages, {checked} artifacts (config {manifest['config_hash'][:12]})")
    for stage in manifest['stages']:
        click.echo(f"- {stage['name']}: {len(stage['artifacts'])} files")

    if problems:
        for problem in problems:
            click.echo(f"❌ {problem}")
    else:
        click.echo("✅ Every artifact matches its recorded hash")

    ledger = database_url(output_dir)
    results_db.init_db(ledger)
    runs = results_db.run_summary(ledger)
    click.echo(f"Found {len(runs)} recent runs in the ledger")
    for run in runs:
        stage = f" at {run['failed_stage']}" if run['failed_stage'] else ''
        click.echo(f"- run {run['id']}: {run['status']}{stage} (seed {run['seed']}, started {run['started_at']})")
    sys.exit(1 if problems else 0)


if __name__ == '__main__':
    verify_data()
