"""Append-only metrics CSV and per-run manifest."""
import csv
import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from .constants import DEFAULT_RESULT_DIR, OUT_DIR_ENV
from .utils import get_logger, to_jsonable

logger = get_logger('metrics')

METRIC_FIELDS = ['run_id', 'wall_clock', 'step', 'metric', 'value', 'seed', 'tags']


@dataclass
class MetricsRow:
    run_id: str
    wall_clock: float
    step: int
    metric: str
    value: float
    seed: int
    tags: str = ''


def output_root(out: Optional[str] = None) -> str:
    """``out`` if given, else ``$MTM_OUT_DIR``, else ``./Result``; created if missing."""
    root = out or os.environ.get(OUT_DIR_ENV) or os.path.join(os.getcwd(), DEFAULT_RESULT_DIR)
    os.makedirs(root, exist_ok=True)
    return root


def format_tags(tags: Optional[Dict[str, Any]]) -> str:
    if not tags:
        return ''
    return ';'.join('{0}={1}'.format(k, tags[k]) for k in sorted(tags))


def parse_tags(text: str) -> Dict[str, str]:
    if not isinstance(text, str) or not text:
        return {}
    return dict(item.split('=', 1) for item in text.split(';') if '=' in item)


class MetricsWriter:
    """
    Appends :class:`MetricsRow` records to ``metrics.csv``.

    Args:
        path (str): CSV file; the header is written when the file is new.
        run_id (str): Identifier shared by every row of the run.
        seed (int): Seed recorded with each row.
        tags (dict, optional): Tags merged into every row.
    """

    def __init__(self, path: str, run_id: str, seed: int, tags: Optional[Dict[str, Any]] = None):
        self.path = path
        self.run_id = run_id
        self.seed = seed
        self.tags = dict(tags or {})
        self.rows: List[MetricsRow] = []
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        if not os.path.exists(path):
            with open(path, 'w', newline='') as f:
                csv.DictWriter(f, fieldnames=METRIC_FIELDS).writeheader()

    def log(self, step: int, metric: str, value: float, tags: Optional[Dict[str, Any]] = None) -> MetricsRow:
        merged = dict(self.tags)
        merged.update(tags or {})
        row = MetricsRow(run_id=self.run_id, wall_clock=round(time.time(), 3), step=int(step), metric=metric,
                         value=float(value), seed=self.seed, tags=format_tags(merged))
        with open(self.path, 'a', newline='') as f:
            csv.DictWriter(f, fieldnames=METRIC_FIELDS).writerow(asdict(row))
        self.rows.append(row)
        return row

    def log_many(self, step: int, values: Dict[str, float], tags: Optional[Dict[str, Any]] = None) -> None:
        for metric in sorted(values):
            self.log(step, metric, values[metric], tags)

    def child(self, **tags) -> 'MetricsWriter':
        """Writer on the same file with extra tags."""
        writer = MetricsWriter.__new__(MetricsWriter)
        writer.path, writer.run_id, writer.seed = self.path, self.run_id, self.seed
        writer.tags = dict(self.tags, **tags)
        writer.rows = self.rows
        return writer


def read_metrics(path: str) -> List[Dict[str, Any]]:
    with open(path, newline='') as f:
        return [dict(row) for row in csv.DictReader(f)]


@dataclass
class RunManifest:
    run_id: str
    command: str
    seed: int
    config_hash: str
    started: float = field(default_factory=time.time)
    finished: Optional[float] = None
    artifacts: Dict[str, str] = field(default_factory=dict)
    environment: Dict[str, str] = field(default_factory=lambda: {
        'python': platform.python_version(), 'numpy': np.__version__})

    def write(self, directory: str) -> str:
        path = os.path.join(directory, 'manifest.json')
        with open(path, 'w') as f:
            json.dump(to_jsonable(asdict(self)), f, indent=2, sort_keys=True)
        return path


def write_config_snapshot(directory: str, config: Dict[str, Any]) -> str:
    path = os.path.join(directory, 'config.json')
    with open(path, 'w') as f:
        json.dump(to_jsonable(config), f, indent=2, sort_keys=True)
    return path
