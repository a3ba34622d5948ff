import hashlib
import json
import logging
import sys
from typing import Any, Dict, List, Sequence

import numpy as np


_logger_depth = 'INFO'

stdout_sh = logging.StreamHandler(sys.stdout)
stdout_sh.setLevel(getattr(logging, _logger_depth))
custom_formatter = logging.Formatter(
    '%(asctime)s - %(name)s - %(levelname)s - %(message)s')
stdout_sh.setFormatter(custom_formatter)


def get_logger(name: str) -> logging.Logger:
    """
    Returns a named package logger writing to stdout.

    Args:
        name (str): Short component name, e.g. ``training``.

    Returns:
        logging.Logger: Logger named ``#trajmask.<name>#``.
    """
    logger = logging.getLogger('#trajmask.{0}#'.format(name))
    logger.setLevel(getattr(logging, _logger_depth))
    if stdout_sh not in logger.handlers:
        logger.addHandler(stdout_sh)
    logger.propagate = False
    return logger


def set_verbose(verbose: bool) -> None:
    level = logging.DEBUG if verbose else getattr(logging, _logger_depth)
    stdout_sh.setLevel(level)
    for name in list(logging.root.manager.loggerDict):
        if name.startswith('#trajmask.'):
            logging.getLogger(name).setLevel(level)


def dict_value_from_path(d: Dict[str, Any], path: Sequence[str]) -> Any:
    cur_dict = d
    for key in path[:-1]:
        cur_dict = cur_dict.get(key, {})
    return cur_dict.get(path[-1], None) if cur_dict is not None else None


def set_value_at_path(d: Dict[str, Any], path: Sequence[str], value: Any) -> None:
    """
    Sets a value inside nested dictionaries, creating intermediate levels.

    Args:
        d (dict): The dictionary to modify in place.
        path (Sequence[str]): Keys from the outermost level inward.
        value (Any): Value stored at the final key.
    """
    cur_dict = d
    for key in path[:-1]:
        nxt = cur_dict.get(key)
        if not isinstance(nxt, dict):
            nxt = {}
            cur_dict[key] = nxt
        cur_dict = nxt
    cur_dict[path[-1]] = value


def seed_streams(seed: int, n: int) -> List[np.random.Generator]:
    """
    Derives ``n`` independent generators from one seed.

    Args:
        seed (int): Root seed.
        n (int): Number of streams.

    Returns:
        List[np.random.Generator]: One generator per stream, stable for a given seed.
    """
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.default_rng(child) for child in children]


def stable_hash(payload: Any) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(',', ':'), default=_json_default)
    return hashlib.sha256(text.encode('utf-8')).hexdigest()[:16]


def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError('Object of type {0} is not JSON serializable'.format(type(obj).__name__))


def to_jsonable(obj: Any) -> Any:
    """Converts numpy containers (recursively) into plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj
