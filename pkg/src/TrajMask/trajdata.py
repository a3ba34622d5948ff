"""
Trajectory containers, normalization, splits, segment sampling and the MTMD file format.

MTMD layout (little-endian)::

    magic b"MTMD" | version u32 | manifest length u32 | manifest UTF-8 JSON
    n_traj u32
    per trajectory: T u32 | presence u8 (rtg=1, state=2, action=4) | state_dim u16 | action_dim u16
                    states f4[T*state_dim] | actions f4[T*action_dim] if present
                    rewards f4[T] | rtg f4[T] if present
"""
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .constants import ACTION, DATASET_FORMAT_VERSION, DATASET_MAGIC, MODALITIES, RTG, STATE, STD_FLOOR
from .exceptions import DatasetError, DatasetFormatError, NotFoundException, ShapeError
from .utils import get_logger

logger = get_logger('trajdata')

PRESENCE_BITS = {RTG: 1, STATE: 2, ACTION: 4}
DEFAULT_SEGMENT_LENGTH = 4


def compute_rtg(rewards: Sequence[float]) -> np.ndarray:
    """
    Undiscounted return-to-go: ``rtg[t] = rewards[t] + rtg[t+1]``.

    The accumulation runs backwards in the input dtype, so the recursion holds exactly in
    that precision.
    """
    rewards = np.asarray(rewards)
    if not np.issubdtype(rewards.dtype, np.floating):
        rewards = rewards.astype(np.float64)
    if rewards.size == 0:
        return rewards.copy()
    return np.add.accumulate(rewards[::-1])[::-1].copy()


@dataclass
class Trajectory:
    states: np.ndarray
    actions: Optional[np.ndarray]
    rewards: np.ndarray
    rtg: Optional[np.ndarray] = None
    tier: str = ''

    def __post_init__(self):
        n = len(self.states)
        for name in ('actions', 'rewards', 'rtg'):
            value = getattr(self, name)
            if value is not None and len(value) != n:
                raise ShapeError('trajectory: {0} has length {1}, states have {2}'.format(name, len(value), n))

    def __len__(self) -> int:
        return len(self.states)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return 0 if self.actions is None else self.actions.shape[1]

    @property
    def presence(self) -> np.ndarray:
        """Flags in modality order (rtg, state, action)."""
        return np.array([self.rtg is not None, True, self.actions is not None])

    def without(self, modality: str) -> 'Trajectory':
        """Copy with ``rtg`` or ``action`` marked absent; the values are dropped."""
        if modality == 'rtg':
            return replace(self, rtg=None)
        if modality == 'action':
            return replace(self, actions=None)
        raise DatasetError('only rtg and action can be absent, not {0!r}'.format(modality))


@dataclass
class Segment:
    start: int
    length: int
    rtg: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    presence: np.ndarray


@dataclass
class SegmentBatch:
    """Stacked segments: ``rtg`` (B, L, 1), ``states`` (B, L, ds), ``actions`` (B, L, da), ``presence`` (B, 3)."""
    rtg: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    presence: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.states.shape[0]

    @property
    def length(self) -> int:
        return self.states.shape[1]

    def modality(self, index: int) -> np.ndarray:
        return (self.rtg, self.states, self.actions)[index]

    def presence_grid(self) -> np.ndarray:
        """Presence broadcast to the (B, L, 3) token grid."""
        return np.broadcast_to(self.presence[:, None, :], (self.batch_size, self.length, 3)).copy()

    def astype(self, dtype) -> 'SegmentBatch':
        return SegmentBatch(self.rtg.astype(dtype), self.states.astype(dtype),
                            self.actions.astype(dtype), self.presence.copy())


@dataclass
class NormStats:
    mean: Dict[str, List[float]]
    std: Dict[str, List[float]]

    def arrays(self, modality: str) -> Tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.mean[modality]), np.asarray(self.std[modality])

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict) -> 'NormStats':
        return cls(mean=dict(payload['mean']), std=dict(payload['std']))


@dataclass
class DatasetManifest:
    env_hash: str = ''
    env: Dict = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)
    train_indices: List[int] = field(default_factory=list)
    eval_indices: List[int] = field(default_factory=list)
    norm_stats: Optional[Dict] = None
    random_ref: Optional[float] = None
    expert_ref: Optional[float] = None
    tiers: List[str] = field(default_factory=list)
    format_version: int = DATASET_FORMAT_VERSION

    def __post_init__(self):
        overlap = set(self.train_indices) & set(self.eval_indices)
        if overlap:
            raise DatasetError('manifest: indices {0} appear in both splits'.format(sorted(overlap)[:5]))

    def stats(self) -> Optional[NormStats]:
        return None if self.norm_stats is None else NormStats.from_dict(self.norm_stats)


@dataclass
class TrajectoryDataset:
    trajectories: List[Trajectory]
    manifest: DatasetManifest

    def train_split(self) -> List[Trajectory]:
        return [self.trajectories[i] for i in self.manifest.train_indices]

    def eval_split(self) -> List[Trajectory]:
        return [self.trajectories[i] for i in self.manifest.eval_indices]


def fit_norm_stats(trajectories: Sequence[Trajectory], action_dim: Optional[int] = None) -> NormStats:
    """
    Per-dimension mean and standard deviation of each modality, floored at ``STD_FLOOR``.

    A modality absent from every trajectory gets mean 0 and std 1.
    """
    if not trajectories:
        raise DatasetError('fit_norm_stats: empty trajectory set')
    state_dim = trajectories[0].state_dim
    action_dim = action_dim or max(t.action_dim for t in trajectories)
    columns = {
        'rtg': [t.rtg.reshape(-1, 1) for t in trajectories if t.rtg is not None],
        'state': [t.states for t in trajectories],
        'action': [t.actions for t in trajectories if t.actions is not None],
    }
    dims = {'rtg': 1, 'state': state_dim, 'action': action_dim}
    mean, std = {}, {}
    for modality in MODALITIES:
        if columns[modality]:
            data = np.concatenate(columns[modality], axis=0).astype(np.float64)
            mean[modality] = data.mean(axis=0).tolist()
            std[modality] = np.maximum(data.std(axis=0), STD_FLOOR).tolist()
        else:
            mean[modality] = [0.0] * dims[modality]
            std[modality] = [1.0] * dims[modality]
    return NormStats(mean=mean, std=std)


def _transform(values: Optional[np.ndarray], mean: np.ndarray, std: np.ndarray, direction: str,
               name: str) -> Optional[np.ndarray]:
    if values is None:
        return None
    values = np.asarray(values, dtype=np.float64)
    trailing = values.shape[-1] if values.ndim > 1 else 1
    if trailing != mean.shape[0]:
        raise ShapeError('normalize: {0} has {1} dims, stats have {2}'.format(name, trailing, mean.shape[0]))
    if values.ndim == 1:
        mean, std = mean[0], std[0]
    if direction == 'apply':
        return (values - mean) / std
    if direction == 'invert':
        return values * std + mean
    raise ValueError('normalize: direction must be apply or invert, got {0!r}'.format(direction))


def normalize(trajectories: Sequence[Trajectory], stats: NormStats, direction: str = 'apply') -> List[Trajectory]:
    """
    Maps every present modality through ``(x - mean) / std`` or its inverse.

    Args:
        trajectories: Trajectories to transform; rewards are left untouched.
        stats (NormStats): Statistics fitted on the training split.
        direction (str): ``'apply'`` or ``'invert'``.

    Returns:
        List[Trajectory]: New float64 trajectories.
    """
    out = []
    for traj in trajectories:
        out.append(replace(
            traj,
            states=_transform(traj.states, *stats.arrays('state'), direction, 'state'),
            actions=_transform(traj.actions, *stats.arrays('action'), direction, 'action'),
            rtg=_transform(traj.rtg, *stats.arrays('rtg'), direction, 'rtg')))
    return out


def normalize_array(values: np.ndarray, stats: NormStats, modality: str, direction: str = 'apply') -> np.ndarray:
    mean, std = stats.arrays(modality)
    return _transform(values, mean, std, direction, modality)


def split_indices(n: int, eval_fraction: float, seed: int) -> Tuple[List[int], List[int]]:
    if n < 2:
        raise DatasetError('split_dataset: need at least 2 trajectories, got {0}'.format(n))
    if not 0.0 < eval_fraction < 1.0:
        raise DatasetError('split_dataset: eval_fraction must lie in (0, 1), got {0}'.format(eval_fraction))
    n_eval = min(n - 1, max(1, int(round(eval_fraction * n))))
    order = np.random.default_rng(seed).permutation(n)
    return sorted(order[n_eval:].tolist()), sorted(order[:n_eval].tolist())


def split_dataset(trajectories: Sequence[Trajectory], eval_fraction: float,
                  seed: int) -> Tuple[List[Trajectory], List[Trajectory]]:
    """Trajectory-level train/eval split, deterministic per seed."""
    train_idx, eval_idx = split_indices(len(trajectories), eval_fraction, seed)
    return [trajectories[i] for i in train_idx], [trajectories[i] for i in eval_idx]


def sample_segment(trajectory: Trajectory, length: int = DEFAULT_SEGMENT_LENGTH,
                   rng: Optional[np.random.Generator] = None, start: Optional[int] = None) -> Segment:
    """
    Copies a contiguous window of ``length`` timesteps.

    Args:
        trajectory (Trajectory): Source trajectory with ``T >= length``.
        length (int): Window length ``L``.
        rng (np.random.Generator): Draws the start uniformly from ``0..T-L``.
        start (int, optional): Fixed start instead of a random one.

    Returns:
        Segment: Raw values; absent modalities are zero-filled and flagged in ``presence``.
    """
    n = len(trajectory)
    if n < length:
        raise DatasetError('sample_segment: trajectory length {0} < segment length {1}'.format(n, length))
    if start is None:
        start = int(rng.integers(0, n - length + 1))
    window = slice(start, start + length)
    states = np.array(trajectory.states[window], copy=True)
    if trajectory.actions is not None:
        actions = np.array(trajectory.actions[window], copy=True)
    else:
        actions = np.zeros((length, 0), dtype=states.dtype)
    if trajectory.rtg is not None:
        rtg = np.array(trajectory.rtg[window], copy=True).reshape(length, 1)
    else:
        rtg = np.zeros((length, 1), dtype=states.dtype)
    return Segment(start=start, length=length, rtg=rtg, states=states, actions=actions,
                   presence=trajectory.presence)


def collate(segments: Sequence[Segment], action_dim: int, dtype=np.float64) -> SegmentBatch:
    """Stacks segments; missing action columns are zero-filled to ``action_dim``."""
    length = segments[0].length
    actions = np.zeros((len(segments), length, action_dim), dtype=dtype)
    for i, seg in enumerate(segments):
        if seg.actions.shape[1]:
            actions[i] = seg.actions
    return SegmentBatch(
        rtg=np.stack([s.rtg for s in segments]).astype(dtype),
        states=np.stack([s.states for s in segments]).astype(dtype),
        actions=actions,
        presence=np.stack([s.presence for s in segments]).astype(bool))


@dataclass
class HeteromodalSplit:
    actioned: List[Trajectory]
    state_only: List[Trajectory]
    eval: List[Trajectory]

    @property
    def train(self) -> List[Trajectory]:
        return self.actioned + self.state_only


def make_heteromodal(trajectories: Sequence[Trajectory], actioned_fraction: float,
                     stateonly_fraction: float, seed: int) -> HeteromodalSplit:
    """
    Builds a heteromodal trajectory set.

    Args:
        trajectories: Complete trajectories.
        actioned_fraction (float): Share keeping all modalities.
        stateonly_fraction (float): Share whose actions are dropped.
        seed (int): Permutation seed.

    Returns:
        HeteromodalSplit: ``round(a*N)`` actioned, ``round(s*N)`` state-only, the rest for eval.
    """
    if actioned_fraction < 0 or stateonly_fraction < 0 or actioned_fraction + stateonly_fraction > 1 + 1e-12:
        raise DatasetError('make_heteromodal: fractions ({0}, {1}) must be non-negative and sum to at most 1'.format(
            actioned_fraction, stateonly_fraction))
    n = len(trajectories)
    n_act = int(round(actioned_fraction * n))
    n_so = min(n - n_act, int(round(stateonly_fraction * n)))
    if n_act == 0:
        raise DatasetError('make_heteromodal: fraction {0} of {1} trajectories leaves none with actions'.format(
            actioned_fraction, n))
    order = np.random.default_rng(seed).permutation(n).tolist() if n_act < n else list(range(n))
    actioned = [trajectories[i] for i in order[:n_act]]
    state_only = [trajectories[i].without('action') for i in order[n_act:n_act + n_so]]
    held_out = [trajectories[i] for i in order[n_act + n_so:]]
    logger.debug('heteromodal split: %d actioned, %d state-only, %d eval', n_act, n_so, len(held_out))
    return HeteromodalSplit(actioned=actioned, state_only=state_only, eval=held_out)


def save_dataset(path: str, dataset: TrajectoryDataset) -> None:
    tiers = [t.tier for t in dataset.trajectories]
    manifest = json.dumps(asdict(replace(dataset.manifest, tiers=tiers)), sort_keys=True).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack('<II', DATASET_FORMAT_VERSION, len(manifest)))
        f.write(manifest)
        f.write(struct.pack('<I', len(dataset.trajectories)))
        for traj in dataset.trajectories:
            bits = sum(PRESENCE_BITS[i] for i, present in enumerate(traj.presence) if present)
            f.write(struct.pack('<IBHH', len(traj), bits, traj.state_dim,
                                traj.action_dim if traj.actions is not None else 0))
            for array in (traj.states, traj.actions, traj.rewards, traj.rtg):
                if array is not None:
                    f.write(np.ascontiguousarray(array, dtype='<f4').tobytes())
    logger.info('saved %d trajectories to %s', len(dataset.trajectories), path)


class _Reader:
    def __init__(self, buffer: bytes, path: str):
        self.buffer = buffer
        self.offset = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.buffer):
            raise DatasetFormatError('{0}: truncated at byte {1}'.format(self.path, self.offset))
        chunk = self.buffer[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int, shape: Tuple[int, ...]) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype='<f4').astype(np.float32).reshape(shape)


def load_dataset(path: str) -> TrajectoryDataset:
    try:
        with open(path, 'rb') as f:
            reader = _Reader(f.read(), path)
    except FileNotFoundError:
        raise NotFoundException('dataset {0} does not exist'.format(path))
    if reader.take(4) != DATASET_MAGIC:
        raise DatasetFormatError('{0}: not an MTMD dataset'.format(path))
    version, manifest_len = reader.unpack('<II')
    if version != DATASET_FORMAT_VERSION:
        raise DatasetFormatError('{0}: unsupported dataset version {1}'.format(path, version))
    try:
        manifest = DatasetManifest(**json.loads(reader.take(manifest_len).decode('utf-8')))
    except (ValueError, TypeError) as exc:
        raise DatasetFormatError('{0}: unreadable manifest ({1})'.format(path, exc))
    (n_traj,) = reader.unpack('<I')
    trajectories = []
    for _ in range(n_traj):
        length, bits, state_dim, action_dim = reader.unpack('<IBHH')
        states = reader.floats(length * state_dim, (length, state_dim))
        actions = reader.floats(length * action_dim, (length, action_dim)) if bits & PRESENCE_BITS[ACTION] else None
        rewards = reader.floats(length, (length,))
        rtg = reader.floats(length, (length,)) if bits & PRESENCE_BITS[RTG] else None
        trajectories.append(Trajectory(states=states, actions=actions, rewards=rewards, rtg=rtg))
    if reader.offset != len(reader.buffer):
        raise DatasetFormatError('{0}: {1} trailing bytes'.format(path, len(reader.buffer) - reader.offset))
    for traj, tier in zip(trajectories, manifest.tiers):
        traj.tier = tier
    return TrajectoryDataset(trajectories=trajectories, manifest=manifest)
