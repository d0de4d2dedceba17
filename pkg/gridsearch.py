"""
Grid-search bookkeeping shared by the registration and predictor searches:
grid expansion, parallel evaluation, per-parameter mean/min marginals and
lexicographic argmin.
"""

import itertools
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


@dataclass
class GridSearchResult:
    table: pd.DataFrame
    marginals: pd.DataFrame
    best: dict
    params: tuple
    value_column: str
    failure_rate: float = 0.0

    def to_csv(self, path):
        self.table.to_csv(path, index=False, float_format='%.10g')

    def influence(self):
        return parameter_influence(self.marginals).rename('influence').rename_axis('parameter').reset_index()

    def write_reports(self, path):
        """Raw table at ``path`` plus ``_marginals.csv`` and ``_influence.csv`` beside it"""
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        stem = os.path.splitext(path)[0]
        written = [path, stem + '_marginals.csv', stem + '_influence.csv']
        self.to_csv(written[0])
        self.marginals.to_csv(written[1], index=False, float_format='%.10g')
        self.influence().to_csv(written[2], index=False, float_format='%.10g')
        return written


def expand_grid(grid, params):
    """Every combination, ordered lexicographically by ``params``"""
    missing = [name for name in params if name not in grid]
    if missing:
        raise ValueError(f"grid is missing parameters {missing}")
    values = [sorted(grid[name]) for name in params]
    if any(len(v) == 0 for v in values):
        raise ValueError("every grid parameter needs at least one value")
    return [dict(zip(params, combo)) for combo in itertools.product(*values)]


def parallel_map(fn, items, n_workers=1):
    items = list(items)
    if n_workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=n_workers) as executor:
        return list(executor.map(fn, items))


def valid_rows(table, value_column):
    mask = np.isfinite(table[value_column].to_numpy(dtype=np.float64))
    if 'valid' in table.columns:
        mask &= table['valid'].to_numpy(dtype=bool)
    return table[mask]


def marginals(table, params, value_column):
    """
    For each parameter value: mean of the error over all other parameters,
    and the minimum over all other parameters. Invalid rows are excluded.
    """
    rows = []
    usable = valid_rows(table, value_column)
    for name in params:
        grouped = usable.groupby(name)[value_column]
        for value, mean_error in grouped.mean().items():
            rows.append({'parameter': name, 'value': value, 'mean_error': float(mean_error),
                         'min_error': float(grouped.min()[value])})
    return pd.DataFrame(rows, columns=['parameter', 'value', 'mean_error', 'min_error'])


def best_row(table, params, value_column):
    """Lowest error; ties go to the lexicographically smallest parameter tuple"""
    usable = valid_rows(table, value_column)
    if usable.empty:
        return None
    ordered = usable.sort_values([value_column] + list(params), kind='mergesort')
    return ordered.iloc[0].to_dict()


def parameter_influence(marginal_table):
    """Spread (std) of each parameter's mean-error marginal across its values"""
    spread = marginal_table.groupby('parameter')['mean_error'].std(ddof=0)
    return spread.sort_values(ascending=False)


def summarize(table, params, value_column, failure_rate=0.0):
    best = best_row(table, params, value_column)
    if best is None:
        logger.warning("grid search produced no valid rows")
    return GridSearchResult(table=table, marginals=marginals(table, params, value_column),
                            best=best, params=tuple(params), value_column=value_column,
                            failure_rate=failure_rate)
