"""Specialized feed-forward baselines, one network per capability."""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from .capabilities import capability_loss
from .constants import MODALITIES
from .diffcore import Tensor
from .exceptions import ConfigError, DatasetError, UnknownKindError
from .layers import MLP, Module
from .masking import capability_mask, capability_target
from .metrics import MetricsWriter
from .trajdata import SegmentBatch, Trajectory
from .training import heldout_batch, sample_batch, train_module
from .utils import get_logger, seed_streams

logger = get_logger('baseline')

BASELINE_TASKS = ('BC', 'RCBC', 'ID', 'FD')


@dataclass
class BaselineConfig:
    hidden_layers: int = 2
    width: int = 256
    learning_rate: float = 2e-4
    weight_decay: float = 0.005
    warmup_steps: int = 500
    total_steps: int = 5000
    batch_size: int = 256

    def __post_init__(self):
        if self.hidden_layers < 1 or self.width < 1:
            raise ConfigError('baseline.width', 'needs at least one hidden layer of positive width')
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError('baseline.warmup_steps', 'must lie in [0, total_steps)')


class BaselineMlp(Module):
    """
    Maps the visible cells of one capability mask, flattened in (t, modality) order, to the
    capability's target cell.
    """

    def __init__(self, task: str, segment_length: int, state_dim: int, action_dim: int,
                 config: BaselineConfig, seed: int = 0, dtype=np.float32):
        task = task.upper()
        if task not in BASELINE_TASKS:
            raise UnknownKindError('baseline: unknown task {0!r}'.format(task))
        self.task = task
        self.length = segment_length
        self.dims = (1, state_dim, action_dim)
        self.dtype = dtype
        layout = capability_mask(task, segment_length)
        self.cells: List[Tuple[int, int]] = [(int(t), int(m)) for t, m in zip(*np.nonzero(layout))]
        self.target = capability_target(task, segment_length)
        in_dim = sum(self.dims[m] for _, m in self.cells)
        out_dim = self.dims[self.target[1]]
        (rng,) = seed_streams(seed, 1)
        self.net = MLP(in_dim, [config.width] * config.hidden_layers, out_dim, rng, activation='gelu', dtype=dtype)

    @property
    def segment_length(self) -> int:
        return self.length

    @property
    def input_dim(self) -> int:
        return self.net.hidden[0].in_dim if self.net.hidden else self.net.out.in_dim

    def features(self, batch: SegmentBatch) -> np.ndarray:
        parts = [batch.modality(m)[:, t] for t, m in self.cells]
        return np.concatenate(parts, axis=1).astype(self.dtype)

    def forward(self, batch: SegmentBatch) -> Tensor:
        return self.net(Tensor(self.features(batch)))

    __call__ = forward

    def reconstruct(self, batch: SegmentBatch, mask: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
        """Zero-filled grid with the target cell predicted; ``mask`` is fixed by the task."""
        out = {name: np.zeros((batch.batch_size, batch.length, self.dims[m]))
               for m, name in enumerate(MODALITIES)}
        t, m = self.target
        out[MODALITIES[m]][:, t] = self.forward(batch).data
        return out


@dataclass
class BaselineResult:
    model: BaselineMlp
    losses: List[float]
    heldout_loss: Optional[float]


def _required(task: str) -> Tuple[int, ...]:
    return (0, 1, 2) if task == 'RCBC' else (1, 2)


def baseline_mlp(task: str, train_set: Sequence[Trajectory], eval_set: Sequence[Trajectory], segment_length: int,
                 state_dim: int, action_dim: int, config: BaselineConfig, seed: int = 0,
                 metrics: Optional[MetricsWriter] = None, dtype=np.float32) -> BaselineResult:
    """
    Trains a specialized baseline on normalized trajectories.

    Args:
        task (str): BC, RCBC, ID or FD.
        train_set: Training trajectories; only those carrying the task's modalities are used.
        eval_set: Held-out trajectories scored with the same loss as the MTM model.
        segment_length (int): Context window, shared with the model it is compared to.
        state_dim (int): State size.
        action_dim (int): Action size.
        config (BaselineConfig): Network and optimizer settings.
        seed (int): Seeds initialization and batch sampling.
        metrics (MetricsWriter, optional): Receives the final train and held-out losses.

    Returns:
        BaselineResult: The trained network with its loss curve and held-out loss.
    """
    task = task.upper()
    needed = _required(task)
    usable = [t for t in train_set if all(t.presence[m] for m in needed)]
    if not usable:
        raise DatasetError('baseline {0}: no training trajectory carries {1}'.format(
            task, [MODALITIES[m] for m in needed]))
    model = BaselineMlp(task, segment_length, state_dim, action_dim, config, seed, dtype)
    t, m = model.target
    _, batch_rng = seed_streams(seed, 2)

    def loss_fn(rng: np.random.Generator) -> Tensor:
        batch = sample_batch(usable, config.batch_size, segment_length, rng, action_dim, dtype)
        return dc.mse(model(batch), batch.modality(m)[:, t].astype(dtype))

    logger.info('training %s baseline (%d inputs) on %d trajectories', task, model.input_dim, len(usable))
    losses = train_module(model, loss_fn, config.total_steps, config.warmup_steps, config.learning_rate,
                          config.weight_decay, batch_rng, name='baseline-' + task)
    heldout = None
    eval_usable = [tr for tr in eval_set if all(tr.presence[k] for k in needed)]
    if eval_usable:
        batch = heldout_batch(eval_usable, segment_length, 256, seed, action_dim, dtype)
        heldout = capability_loss(model, batch, task)
    if metrics is not None:
        values = {'baseline_train_loss': losses[-1]}
        if heldout is not None:
            values['baseline_eval_' + task] = heldout
        metrics.log_many(config.total_steps, values, {'task': task})
    return BaselineResult(model=model, losses=losses, heldout_loss=heldout)
