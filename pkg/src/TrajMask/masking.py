"""
Mask grids over (timestep, modality) cells. ``True`` marks a visible cell.

Cells are ordered timestep-major, then modality in (rtg, state, action) order, so the flat
position of cell ``(t, m)`` is ``3 * t + m``. Timesteps passed as ``query_t`` are 1-based.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .constants import ACTION, CAPABILITY_KINDS, MASK_KINDS, RTG, STATE
from .exceptions import MaskError, UnknownKindError

DEFAULT_RATIO_RANGE = (0.0, 0.6)
NEXT_STATE_KINDS = ('FD', 'ID', 'FORECAST')


def _check_range(ratio_range: Sequence[float]) -> Tuple[float, float]:
    lo, hi = float(ratio_range[0]), float(ratio_range[1])
    if not 0.0 <= lo <= hi <= 1.0:
        raise MaskError('mask ratio range must satisfy 0 <= lo <= hi <= 1, got {0}'.format((lo, hi)))
    return lo, hi


def _random_grid(length: int, ratio_range: Sequence[float], rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    lo, hi = _check_range(ratio_range)
    ratio = float(rng.uniform(lo, hi))
    n_cells = 3 * length
    hidden = rng.choice(n_cells, size=int(round(ratio * n_cells)), replace=False)
    flat = np.ones(n_cells, dtype=bool)
    flat[hidden] = False
    return flat.reshape(length, 3), ratio


def random_mask(length: int, ratio_range: Sequence[float] = DEFAULT_RATIO_RANGE,
                rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Hides exactly ``round(r * 3L)`` cells chosen without replacement.

    Args:
        length (int): Segment length ``L``.
        ratio_range: Bounds of the uniformly drawn ratio ``r``.
        rng (np.random.Generator): Randomness source.

    Returns:
        np.ndarray: Boolean grid of shape (L, 3).
    """
    return _random_grid(length, ratio_range, rng)[0]


@dataclass
class AutoregressiveDraw:
    grid: np.ndarray
    base_ratio: float
    pivot: int


def draw_random_autoregressive(length: int, ratio_range: Sequence[float] = DEFAULT_RATIO_RANGE,
                               rng: Optional[np.random.Generator] = None) -> AutoregressiveDraw:
    """Random mask plus a hidden suffix starting at a pivot chosen among the hidden cells."""
    grid, ratio = _random_grid(length, ratio_range, rng)
    flat = grid.reshape(-1)
    candidates = np.flatnonzero(~flat)
    pivot = int(rng.choice(candidates)) if candidates.size else flat.size - 1
    flat[pivot:] = False
    return AutoregressiveDraw(grid=flat.reshape(length, 3), base_ratio=ratio, pivot=pivot)


def random_autoregressive_mask(length: int, ratio_range: Sequence[float] = DEFAULT_RATIO_RANGE,
                               rng: Optional[np.random.Generator] = None) -> np.ndarray:
    return draw_random_autoregressive(length, ratio_range, rng).grid


def default_query_t(kind: str, length: int) -> int:
    kind = kind.upper()
    if kind not in CAPABILITY_KINDS:
        raise UnknownKindError('unknown capability {0!r}'.format(kind))
    return length - 1 if kind in NEXT_STATE_KINDS else length


def capability_mask(kind: str, length: int, query_t: Optional[int] = None) -> np.ndarray:
    """
    Deterministic capability layout.

    Args:
        kind (str): One of BC, RCBC, ID, FD, FULL, FORECAST.
        length (int): Segment length ``L``.
        query_t (int, optional): 1-based query timestep; defaults to :func:`default_query_t`.

    Returns:
        np.ndarray: Boolean grid of shape (L, 3).
    """
    kind = kind.upper()
    if query_t is None:
        query_t = default_query_t(kind, length)
    if kind not in CAPABILITY_KINDS:
        raise UnknownKindError('unknown capability {0!r}'.format(kind))
    if not 1 <= query_t <= length:
        raise MaskError('{0}: query_t {1} outside 1..{2}'.format(kind, query_t, length))
    if kind in NEXT_STATE_KINDS and query_t == length:
        raise MaskError('{0}: query_t {1} leaves no next-state slot in a segment of length {2}'.format(
            kind, query_t, length))
    grid = np.zeros((length, 3), dtype=bool)
    q = query_t
    if kind == 'FULL':
        grid[:] = True
    elif kind == 'BC':
        grid[:q, STATE] = True
        grid[:q - 1, ACTION] = True
    elif kind == 'RCBC':
        grid[:q, STATE] = True
        grid[:q - 1, ACTION] = True
        grid[:q, RTG] = True
    elif kind == 'ID':
        grid[:q + 1, STATE] = True
    elif kind == 'FD':
        grid[:q, STATE] = True
        grid[:q, ACTION] = True
    else:
        grid[:q, STATE] = True
        grid[:q, RTG] = True
    return grid


def capability_target(kind: str, length: int, query_t: Optional[int] = None) -> Optional[Tuple[int, int]]:
    """0-based ``(t, modality)`` cell predicted by a capability; ``None`` for FULL."""
    kind = kind.upper()
    if query_t is None:
        query_t = default_query_t(kind, length)
    if kind == 'FULL':
        return None
    if kind in ('BC', 'RCBC', 'ID'):
        return query_t - 1, ACTION
    if kind in ('FD', 'FORECAST'):
        return query_t, STATE
    raise UnknownKindError('unknown capability {0!r}'.format(kind))


def apply_presence(grid: np.ndarray, presence: np.ndarray) -> np.ndarray:
    """
    Hides cells of absent modalities.

    ``grid`` is (L, 3) or (B, L, 3); ``presence`` is (3,) or (B, 3).
    """
    presence = np.asarray(presence, dtype=bool)
    if presence.ndim == 1:
        return grid & presence
    if grid.ndim == 2:
        grid = np.broadcast_to(grid, (presence.shape[0],) + grid.shape)
    return grid & presence[:, None, :]


def training_mask(kind: str, length: int, rng: np.random.Generator,
                  ratio_range: Sequence[float] = DEFAULT_RATIO_RANGE) -> np.ndarray:
    """One training-time mask; capability kinds give their fixed inference layout."""
    kind_lower = kind.lower()
    if kind_lower not in MASK_KINDS:
        raise UnknownKindError('unknown mask kind {0!r}'.format(kind))
    if kind_lower == 'random':
        return random_mask(length, ratio_range, rng)
    if kind_lower == 'random_autoregressive':
        return random_autoregressive_mask(length, ratio_range, rng)
    return capability_mask(kind_lower.upper(), length)


def batch_masks(kind: str, batch_size: int, length: int, rng: np.random.Generator,
                ratio_range: Sequence[float] = DEFAULT_RATIO_RANGE,
                presence: Optional[np.ndarray] = None) -> np.ndarray:
    """Draws one mask per segment (ratio drawn per segment) and applies presence."""
    grids = np.stack([training_mask(kind, length, rng, ratio_range) for _ in range(batch_size)])
    if presence is not None:
        grids = apply_presence(grids, presence)
    return ensure_visible(grids)


def ensure_visible(grids: np.ndarray) -> np.ndarray:
    """Reveals the first state cell of any (L, 3) grid in the batch that hides everything."""
    grids = np.array(grids, dtype=bool, copy=True)
    empty = ~grids.reshape(grids.shape[0], -1).any(axis=1)
    grids[empty, 0, STATE] = True
    return grids
