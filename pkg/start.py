#!/usr/bin/env python3
"""
Startup script: load the environment, prepare the run ledger and run the
whole pipeline from the run-config named by RUN_CONFIG.
"""

import os
import sys

# Add current directory to Python path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import click
from dotenv import load_dotenv


def main():
    """Run the configured pipeline once and exit with its status"""
    load_dotenv()
    from config import ENV_RUN_CONFIG, database_url, load_run_config
    from errors import MotionError
    import results_db
    from pipeline import run_pipeline

    click.echo("🚀 Starting motion pipeline")
    click.echo("=" * 50)

    config_path = os.environ.get(ENV_RUN_CONFIG, 'run_config.json')
    try:
        cfg = load_run_config(config_path)
        ledger = database_url(cfg.paths.output_dir)
        os.makedirs(cfg.paths.output_dir, exist_ok=True)

        click.echo("📊 Initializing run ledger...")
        results_db.init_db(ledger)
        click.echo("🔄 Updating ledger schema...")
        results_db.update_database(ledger)

        click.echo(f"📁 Config: {config_path}")
        click.echo(f"💾 Ledger: {'external' if os.environ.get('DATABASE_URL') else 'SQLite'}")
        click.echo(f"🔧 Workers: {cfg.n_workers}, seed: {cfg.seed}")
        click.echo("=" * 50)
        result = run_pipeline(cfg, ledger_url=ledger, on_stage=lambda name: click.echo(f"📊 Stage {name}"))
    except MotionError as e:
        click.echo(f"❌ {e}", err=True)
        sys.exit(e.exit_code)

    click.echo(f"✅ Pipeline finished, manifest at {result.manifest_path}")


if __name__ == '__main__':
    main()
