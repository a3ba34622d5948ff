"""
Inference capabilities selected purely by mask choice.

Every function here is batched: histories are ``(B, n, dim)`` arrays with the most recent
timestep last, and outputs are ``(B, dim)`` arrays in raw (denormalized) units. Windows
shorter than the model's segment are left-padded by repeating their earliest timestep.
"""
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterator, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd

from .constants import MODALITIES
from .envs import EnvConfig, env_reset, env_step, normalized_score
from .exceptions import DatasetError, MaskError, UnknownKindError
from .masking import apply_presence, capability_mask, capability_target
from .trajdata import NormStats, SegmentBatch, normalize_array
from .utils import get_logger, seed_streams

logger = get_logger('capabilities')

DEFAULT_EPISODES = 20
ROLLOUT_MODES = ('BC', 'RCBC', 'TWO_STAGE')


class Reconstructor(Protocol):
    """Anything that predicts grid cells from a masked batch: the MTM model or a baseline."""
    training: bool

    @property
    def segment_length(self) -> int: ...

    def reconstruct(self, batch: SegmentBatch, mask: np.ndarray) -> Dict[str, np.ndarray]: ...

    def train(self, mode: bool = True): ...


@contextmanager
def evaluation(model: Reconstructor) -> Iterator[Reconstructor]:
    """Puts ``model`` in eval mode and restores its previous mode afterwards."""
    was_training = model.training
    model.train(False)
    try:
        yield model
    finally:
        model.train(was_training)


def _norm(values: np.ndarray, stats: Optional[NormStats], modality: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return values if stats is None else normalize_array(values, stats, modality, 'apply')


def _denorm(values: np.ndarray, stats: Optional[NormStats], modality: str) -> np.ndarray:
    return values if stats is None else normalize_array(values, stats, modality, 'invert')


def _pad_left(values: np.ndarray, length: int) -> np.ndarray:
    n = values.shape[1]
    if n == 0:
        raise DatasetError('capability window: empty history')
    if n > length:
        raise DatasetError('capability window: history of {0} steps exceeds {1}'.format(n, length))
    if n == length:
        return values
    return np.concatenate([np.repeat(values[:, :1], length - n, axis=1), values], axis=1)


def _with_slot(values: np.ndarray) -> np.ndarray:
    """Appends one zero timestep for a cell the model will predict."""
    return np.concatenate([values, np.zeros_like(values[:, :1])], axis=1)


def _batch(states: np.ndarray, actions: np.ndarray, rtg: np.ndarray, rtg_present: bool = True) -> SegmentBatch:
    b = states.shape[0]
    presence = np.tile(np.array([rtg_present, True, True]), (b, 1))
    return SegmentBatch(rtg=rtg, states=states, actions=actions, presence=presence)


def _predict_cell(model: Reconstructor, batch: SegmentBatch, kind: str) -> np.ndarray:
    length = model.segment_length
    mask = apply_presence(capability_mask(kind, length), batch.presence)
    t, m = capability_target(kind, length)
    with evaluation(model):
        preds = model.reconstruct(batch, mask)
    return preds[MODALITIES[m]][:, t]


def predict_forward(model: Reconstructor, stats: Optional[NormStats], states: np.ndarray,
                    actions: np.ndarray) -> np.ndarray:
    """
    One-step forward dynamics.

    Args:
        model: Trained reconstructor.
        stats (NormStats): Normalization of the training split, or ``None`` for normalized inputs.
        states (np.ndarray): (B, n, ds) states up to the current one, ``n <= L - 1``.
        actions (np.ndarray): (B, n, da) actions; the last is the action taken at the current state.

    Returns:
        np.ndarray: (B, ds) predicted next state.
    """
    length = model.segment_length
    states = _pad_left(_norm(states, stats, 'state'), length - 1)
    actions = _pad_left(_norm(actions, stats, 'action'), length - 1)
    rtg = np.zeros(states.shape[:2] + (1,))
    batch = _batch(_with_slot(states), _with_slot(actions), _with_slot(rtg), rtg_present=False)
    return _denorm(_predict_cell(model, batch, 'FD'), stats, 'state')


def predict_inverse(model: Reconstructor, stats: Optional[NormStats], states: np.ndarray,
                    next_state: np.ndarray) -> np.ndarray:
    """
    Inverse dynamics: the action leading from the current state to ``next_state``.

    Args:
        states (np.ndarray): (B, n, ds) history ending at the current state, ``n <= L - 1``.
        next_state (np.ndarray): (B, ds) desired next state.

    Returns:
        np.ndarray: (B, da) predicted action.
    """
    length = model.segment_length
    window = _pad_left(_norm(states, stats, 'state'), length - 1)
    nxt = _norm(next_state, stats, 'state')[:, None, :]
    full = np.concatenate([window, nxt], axis=1)
    action_dim = len(stats.mean['action']) if stats is not None else model_action_dim(model)
    actions = np.zeros((full.shape[0], length, action_dim))
    rtg = np.zeros((full.shape[0], length, 1))
    batch = _batch(full, actions, rtg, rtg_present=False)
    return _denorm(_predict_cell(model, batch, 'ID'), stats, 'action')


def model_action_dim(model: Reconstructor) -> int:
    config = getattr(model, 'config', None)
    return int(getattr(config, 'action_dim'))


@dataclass
class RolloutContext:
    """
    Sliding window of one episode.

    ``buffer`` keeps the last ``L - 1`` completed ``(state, action, rtg)`` timesteps;
    ``rtg`` starts at the target return and loses each observed reward.
    """
    length: int
    state: np.ndarray
    target_return: Optional[float] = None
    rtg: float = 0.0
    total_reward: float = 0.0
    buffer: Deque[Tuple[np.ndarray, np.ndarray, float]] = field(default_factory=deque)

    def __post_init__(self):
        self.buffer = deque(self.buffer, maxlen=max(self.length - 1, 0))
        self.rtg = float(self.target_return) if self.target_return is not None else 0.0

    def record(self, action: np.ndarray, reward: float, next_state: np.ndarray) -> None:
        self.buffer.append((np.asarray(self.state, dtype=np.float64), np.asarray(action, dtype=np.float64),
                            self.rtg))
        self.rtg = self.rtg - reward
        self.total_reward += reward
        self.state = np.asarray(next_state, dtype=np.float64)

    def window(self, action_dim: int, include_current: bool = True) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Raw (n, ds), (n, da), (n, 1) arrays; the current step carries a zero action."""
        entries = list(self.buffer)
        if include_current:
            entries.append((self.state, np.zeros(action_dim), self.rtg))
        states = np.stack([e[0] for e in entries])
        actions = np.stack([e[1] for e in entries])
        rtg = np.array([[e[2]] for e in entries])
        return states, actions, rtg


def _stack_windows(contexts: Sequence[RolloutContext], action_dim: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    windows = [c.window(action_dim) for c in contexts]
    lengths = {w[0].shape[0] for w in windows}
    if len(lengths) != 1:
        raise DatasetError('rollout contexts hold windows of different lengths {0}'.format(sorted(lengths)))
    states, actions, rtg = (np.stack([w[i] for w in windows]) for i in range(3))
    return states, actions, rtg


def act(model: Reconstructor, stats: Optional[NormStats], contexts: Sequence[RolloutContext], mode: str,
        action_bound: float = 1.0) -> np.ndarray:
    """
    BC or RCBC action for each context, clipped to ``action_bound``.

    Returns:
        np.ndarray: (B, da) actions.
    """
    mode = mode.upper()
    if mode not in ('BC', 'RCBC'):
        raise UnknownKindError('act: mode must be BC or RCBC, got {0!r}'.format(mode))
    if mode == 'RCBC' and any(c.target_return is None for c in contexts):
        raise MaskError('act: RCBC needs a target return on every context')
    length = model.segment_length
    action_dim = len(stats.mean['action']) if stats is not None else model_action_dim(model)
    states, actions, rtg = _stack_windows(contexts, action_dim)
    batch = _batch(_pad_left(_norm(states, stats, 'state'), length),
                   _pad_left(_norm(actions, stats, 'action'), length),
                   _pad_left(_norm(rtg, stats, 'rtg'), length))
    action = _denorm(_predict_cell(model, batch, mode), stats, 'action')
    return np.clip(action, -action_bound, action_bound)


def act_heteromodal_two_stage(model: Reconstructor, stats: Optional[NormStats],
                              contexts: Sequence[RolloutContext], action_bound: float = 1.0) -> np.ndarray:
    """
    Forecasts the next state from states and return-to-go, then recovers the action with
    the inverse-dynamics mask.
    """
    if any(c.target_return is None for c in contexts):
        raise MaskError('two-stage inference needs a target return on every context')
    length = model.segment_length
    action_dim = len(stats.mean['action']) if stats is not None else model_action_dim(model)
    states, _, rtg = _stack_windows(contexts, action_dim)
    states_n = _pad_left(_norm(states[:, -(length - 1):], stats, 'state'), length - 1)
    rtg_n = _pad_left(_norm(rtg[:, -(length - 1):], stats, 'rtg'), length - 1)
    actions = np.zeros(states_n.shape[:2] + (action_dim,))
    forecast = _batch(_with_slot(states_n), _with_slot(actions), _with_slot(rtg_n))
    next_state = _denorm(_predict_cell(model, forecast, 'FORECAST'), stats, 'state')
    action = predict_inverse(model, stats, states[:, -(length - 1):], next_state)
    return np.clip(action, -action_bound, action_bound)


@dataclass
class EvalReport:
    capability: str
    seed: int
    metrics: Dict[str, float]
    raw_returns: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {'capability': self.capability, 'seed': self.seed, 'metrics': dict(self.metrics),
                'raw_returns': list(self.raw_returns)}


def rollout_eval(model: Reconstructor, stats: Optional[NormStats], env: EnvConfig, mode: str,
                 target_return: Optional[float], n_episodes: int = DEFAULT_EPISODES, seed: int = 0,
                 references: Optional[Dict[str, float]] = None) -> EvalReport:
    """
    Runs ``n_episodes`` full episodes in lockstep and scores them.

    Args:
        model: Trained reconstructor.
        stats (NormStats): Normalization of the training split.
        env (EnvConfig): Environment to roll out in.
        mode (str): ``BC``, ``RCBC`` or ``TWO_STAGE``.
        target_return (float, optional): Initial return-to-go for RCBC and two-stage modes.
        n_episodes (int): Number of episodes.
        seed (int): Each episode draws its reset and noise from its own stream of this seed.
        references (dict, optional): ``random``/``expert`` reference returns for normalized scores.

    Returns:
        EvalReport: Raw returns with mean, std and normalized scores.
    """
    mode = mode.upper()
    if mode not in ROLLOUT_MODES:
        raise UnknownKindError('rollout_eval: unknown mode {0!r}'.format(mode))
    streams = seed_streams(seed, n_episodes)
    contexts = [RolloutContext(model.segment_length, env_reset(env, rng),
                               target_return if mode != 'BC' else None) for rng in streams]
    for _ in range(env.horizon):
        if mode == 'TWO_STAGE':
            actions = act_heteromodal_two_stage(model, stats, contexts, env.action_bound)
        else:
            actions = act(model, stats, contexts, mode, env.action_bound)
        for ctx, action, rng in zip(contexts, actions, streams):
            next_state, reward = env_step(ctx.state, action, env, rng)
            ctx.record(action, reward, next_state)
    returns = np.array([c.total_reward for c in contexts])
    metrics = {'mean_return': float(returns.mean()), 'std_return': float(returns.std())}
    if references is not None:
        scores = np.array([normalized_score(r, references['random'], references['expert']) for r in returns])
        metrics['normalized_score'] = float(scores.mean())
        metrics['normalized_std'] = float(scores.std())
    logger.debug('%s rollout (seed %d): mean return %.4f', mode, seed, metrics['mean_return'])
    return EvalReport(capability=mode, seed=seed, metrics=metrics, raw_returns=returns.tolist())


def capability_loss(model: Reconstructor, batch: SegmentBatch, kind: str, query_t: Optional[int] = None) -> float:
    """
    Held-out loss of one capability in normalized units.

    FULL averages over every present cell; the other kinds score their target cell on rows
    where the target modality is present.
    """
    length = model.segment_length
    mask = apply_presence(capability_mask(kind, length, query_t), batch.presence)
    with evaluation(model):
        preds = model.reconstruct(batch, mask)
    target = capability_target(kind, length, query_t)
    if target is None:
        total, count = 0.0, 0
        for m, name in enumerate(MODALITIES):
            rows = batch.presence[:, m]
            diff = preds[name][rows] - batch.modality(m)[rows]
            total += float(np.sum(diff * diff))
            count += diff.size
        return total / count
    t, m = target
    rows = batch.presence[:, m]
    if not rows.any():
        raise DatasetError('capability_loss: no row carries the {0} target'.format(MODALITIES[m]))
    diff = preds[MODALITIES[m]][rows, t] - batch.modality(m)[rows, t]
    return float(np.mean(diff * diff))


def persistence_loss(batch: SegmentBatch, query_t: Optional[int] = None) -> float:
    """FD loss of predicting that the state does not change."""
    t, _ = capability_target('FD', batch.length, query_t)
    diff = batch.states[:, t - 1] - batch.states[:, t]
    return float(np.mean(diff * diff))


def resolve_target_return(references: Dict[str, float], target: Optional[float] = None,
                          scale: Optional[float] = None, dataset_best: Optional[float] = None) -> float:
    """Absolute ``target``, else ``scale`` times the dataset-best return, else the expert reference."""
    if target is not None:
        return float(target)
    if scale is not None and dataset_best is not None:
        return float(scale) * float(dataset_best)
    return float(references['expert'])


def rcbc_target_sweep(model: Reconstructor, stats: Optional[NormStats], env: EnvConfig,
                      references: Dict[str, float], levels: int = 5, n_episodes: int = DEFAULT_EPISODES,
                      seed: int = 0) -> Tuple[pd.DataFrame, float]:
    """
    RCBC at target returns evenly spaced between the random and expert references.

    Returns:
        Tuple[pd.DataFrame, float]: Per-level ``target``/``mean_return`` rows and the Spearman
        correlation between them.
    """
    targets = np.linspace(references['random'], references['expert'], levels)
    rows = []
    for target in targets:
        report = rollout_eval(model, stats, env, 'RCBC', float(target), n_episodes, seed, references)
        rows.append({'target': float(target), 'mean_return': report.metrics['mean_return']})
    frame = pd.DataFrame(rows)
    rho = frame['target'].corr(frame['mean_return'], method='spearman')
    return frame, float(rho) if np.isfinite(rho) else 0.0
