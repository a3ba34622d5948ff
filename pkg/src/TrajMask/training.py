"""
Masked-reconstruction training: loss, AdamW, warmup + cosine schedule, the training loop and
the MTMC checkpoint container.

MTMC layout (little-endian)::

    magic b"MTMC" | version u32 | header length u32 | header UTF-8 JSON | tensor blobs

The header carries both configs, the step, normalization statistics, generator states and
an index of ``{name, group, dtype, shape, offset, nbytes}`` entries into the blob section.
"""
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from .capabilities import capability_loss
from .constants import CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC, MASK_KINDS, MODALITIES
from .diffcore import Tensor
from .exceptions import ConfigError, DatasetError, DatasetFormatError, NonFiniteError, NotFoundException, ShapeError
from .layers import Module
from .masking import DEFAULT_RATIO_RANGE, batch_masks
from .metrics import MetricsWriter
from .model import ModelConfig, MtmModel
from .trajdata import NormStats, SegmentBatch, Trajectory, collate, sample_segment
from .utils import get_logger, seed_streams

logger = get_logger('training')

HELDOUT_KINDS = ('FULL', 'FD', 'ID')


@dataclass
class TrainConfig:
    batch_size: int = 64
    total_steps: int = 5000
    warmup_steps: int = 500
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    betas: List[float] = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    grad_clip: float = 1.0
    mask_kind: str = 'random_autoregressive'
    mask_ratio_range: List[float] = field(default_factory=lambda: list(DEFAULT_RATIO_RANGE))
    segment_length: int = 4
    eval_interval: int = 500
    eval_batch_size: int = 256
    checkpoint_interval: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError('train.batch_size', 'must be at least 1')
        if self.total_steps < 1:
            raise ConfigError('train.total_steps', 'must be at least 1')
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError('train.warmup_steps', '{0} must lie in [0, total_steps={1})'.format(
                self.warmup_steps, self.total_steps))
        if self.mask_kind.lower() not in MASK_KINDS:
            raise ConfigError('train.mask_kind', 'unknown mask kind {0!r}'.format(self.mask_kind))
        lo, hi = self.mask_ratio_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError('train.mask_ratio_range', 'expected 0 <= lo <= hi <= 1')
        if self.eval_interval < 1:
            raise ConfigError('train.eval_interval', 'must be at least 1')


def masked_mse_loss(preds: Sequence[Tensor], batch: SegmentBatch, presence: Optional[np.ndarray] = None) -> Tensor:
    """
    Mean squared error over every present cell, hidden or visible.

    Args:
        preds: Predictions per modality in (rtg, state, action) order, each (B, L, dim).
        batch (SegmentBatch): Targets.
        presence (np.ndarray, optional): (B, L, 3) cell presence; defaults to the batch's
            per-segment presence. Absent cells add nothing to the value or the gradient.

    Returns:
        Tensor: Scalar loss averaged over contributing scalar elements.
    """
    if presence is None:
        presence = batch.presence_grid()
    presence = np.asarray(presence, dtype=bool)
    total = 0
    terms = []
    for m, pred in enumerate(preds):
        target = batch.modality(m)
        if pred.shape != target.shape:
            raise ShapeError('masked_mse_loss: {0} predictions {1} vs targets {2}'.format(
                MODALITIES[m], pred.shape, target.shape))
        weight = presence[:, :, m, None].astype(pred.dtype)
        count = int(presence[:, :, m].sum()) * target.shape[-1]
        if count == 0:
            continue
        total += count
        terms.append(dc.mse(pred, target.astype(pred.dtype), weight, reduction='sum'))
    if total == 0:
        raise DatasetError('masked_mse_loss: every cell is absent')
    loss = terms[0]
    for term in terms[1:]:
        loss = dc.add(loss, term)
    return dc.scale(loss, 1.0 / total)


def lr_at_step(step: int, config: TrainConfig) -> float:
    """Linear warmup to the peak rate, then cosine decay to 0 at ``total_steps``."""
    peak = config.learning_rate
    if step < config.warmup_steps:
        return peak * step / config.warmup_steps
    progress = (step - config.warmup_steps) / max(1, config.total_steps - config.warmup_steps)
    progress = min(max(progress, 0.0), 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def decays(name: str) -> bool:
    """Weight decay applies to projection matrices only, never to biases, norms or embeddings."""
    return name.endswith('.weight')


def optimizer_step(params: Dict[str, Tensor], state: OptimState, lr: float, weight_decay: float,
                   betas: Sequence[float] = (0.9, 0.999), eps: float = 1e-8,
                   grads: Optional[Dict[str, np.ndarray]] = None,
                   decay_filter: Callable[[str], bool] = decays) -> OptimState:
    """
    One AdamW update with decoupled weight decay, in place.

    Args:
        params: Named parameters.
        state (OptimState): Moment accumulators, updated in place.
        lr (float): Learning rate for this step.
        weight_decay (float): Decay coefficient applied directly to decayed parameters.
        betas: Moment decay rates.
        eps (float): Denominator offset.
        grads (dict, optional): Gradients by name; defaults to each parameter's ``grad``.
            Parameters without a gradient are left untouched.
        decay_filter: Chooses which names receive weight decay.

    Returns:
        OptimState: ``state``.
    """
    b1, b2 = betas
    state.step += 1
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError('optimizer_step: gradient of {0} is not finite'.format(name))
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        if weight_decay and decay_filter(name):
            update = update + lr * weight_decay * p.data
        p.data -= update.astype(p.dtype, copy=False)
    return state


class AdamW:
    def __init__(self, params: Dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 betas: Sequence[float] = (0.9, 0.999), eps: float = 1e-8,
                 decay_filter: Callable[[str], bool] = decays):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = tuple(betas)
        self.eps = eps
        self.decay_filter = decay_filter
        self.state = OptimState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: Optional[float] = None) -> None:
        optimizer_step(self.params, self.state, self.lr if lr is None else lr, self.weight_decay,
                       self.betas, self.eps, decay_filter=self.decay_filter)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scales gradients in place so their global norm is at most ``max_norm``; returns the prior norm."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    coef = max_norm / (total + 1e-6)
    if coef < 1.0:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * np.asarray(coef, dtype=p.grad.dtype)
    return total


def sample_batch(trajectories: Sequence[Trajectory], batch_size: int, length: int, rng: np.random.Generator,
                 action_dim: int, dtype=np.float64) -> SegmentBatch:
    """Uniform over trajectories, then a uniform segment start within each."""
    picks = rng.integers(0, len(trajectories), size=batch_size)
    return collate([sample_segment(trajectories[i], length, rng) for i in picks], action_dim, dtype)


def heldout_batch(trajectories: Sequence[Trajectory], length: int, size: int, seed: int,
                  action_dim: int, dtype=np.float64) -> SegmentBatch:
    """Fixed evaluation batch; the same for every call with the same seed."""
    rng = np.random.default_rng([seed, 1])
    return sample_batch(trajectories, size, length, rng, action_dim, dtype)


def heldout_losses(model: MtmModel, batch: SegmentBatch) -> Dict[str, float]:
    kinds = HELDOUT_KINDS if model.segment_length > 1 else ('FULL',)
    return {kind: capability_loss(model, batch, kind) for kind in kinds}


@dataclass
class Checkpoint:
    model_config: Dict
    train_config: Dict
    step: int
    params: Dict[str, np.ndarray]
    moments: Dict[str, Dict[str, np.ndarray]]
    optimizer_step: int
    rng: Dict[str, Dict]
    norm_stats: Optional[Dict] = None
    extra: Dict = field(default_factory=dict)

    def build_model(self, seed: int = 0) -> MtmModel:
        model = MtmModel(ModelConfig(**self.model_config), seed=seed)
        model.load_state_dict(self.params)
        return model

    def stats(self) -> Optional[NormStats]:
        return None if self.norm_stats is None else NormStats.from_dict(self.norm_stats)


def save_checkpoint(path: str, model: MtmModel, optimizer: Optional[AdamW], config: TrainConfig, step: int,
                    stats: Optional[NormStats] = None, rng: Optional[Dict[str, Dict]] = None,
                    extra: Optional[Dict] = None) -> str:
    blobs: List[bytes] = []
    index = []
    offset = 0

    def add(group: str, name: str, array: np.ndarray) -> None:
        nonlocal offset
        data = np.ascontiguousarray(array)
        raw = data.astype(data.dtype.newbyteorder('<'), copy=False).tobytes()
        index.append({'group': group, 'name': name, 'dtype': data.dtype.newbyteorder('<').str,
                      'shape': list(data.shape), 'offset': offset, 'nbytes': len(raw)})
        blobs.append(raw)
        offset += len(raw)

    for name, array in model.state_dict().items():
        add('param', name, array)
    if optimizer is not None:
        for name in sorted(optimizer.state.m):
            add('m', name, optimizer.state.m[name])
            add('v', name, optimizer.state.v[name])
    header = {
        'model_config': asdict(model.config), 'train_config': asdict(config), 'step': int(step),
        'optimizer_step': optimizer.state.step if optimizer is not None else 0,
        'rng': rng or {}, 'norm_stats': None if stats is None else stats.to_dict(),
        'extra': extra or {}, 'tensors': index,
    }
    payload = json.dumps(header, sort_keys=True).encode('utf-8')
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<II', CHECKPOINT_FORMAT_VERSION, len(payload)))
        f.write(payload)
        for blob in blobs:
            f.write(blob)
    logger.debug('checkpoint at step %d written to %s', step, path)
    return path


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise NotFoundException('checkpoint {0} does not exist'.format(path))
    with open(path, 'rb') as f:
        buffer = f.read()
    if buffer[:4] != CHECKPOINT_MAGIC:
        raise DatasetFormatError('{0}: not an MTMC checkpoint'.format(path))
    if len(buffer) < 12:
        raise DatasetFormatError('{0}: truncated header'.format(path))
    version, header_len = struct.unpack('<II', buffer[4:12])
    if version != CHECKPOINT_FORMAT_VERSION:
        raise DatasetFormatError('{0}: unsupported checkpoint version {1}'.format(path, version))
    if len(buffer) < 12 + header_len:
        raise DatasetFormatError('{0}: truncated header'.format(path))
    header = json.loads(buffer[12:12 + header_len].decode('utf-8'))
    base = 12 + header_len
    groups: Dict[str, Dict[str, np.ndarray]] = {'param': {}, 'm': {}, 'v': {}}
    for entry in header['tensors']:
        start = base + entry['offset']
        end = start + entry['nbytes']
        if end > len(buffer):
            raise DatasetFormatError('{0}: truncated tensor {1}'.format(path, entry['name']))
        array = np.frombuffer(buffer[start:end], dtype=np.dtype(entry['dtype'])).reshape(entry['shape'])
        groups[entry['group']][entry['name']] = array.astype(array.dtype.newbyteorder('='))
    return Checkpoint(model_config=header['model_config'], train_config=header['train_config'],
                      step=header['step'], params=groups['param'],
                      moments={'m': groups['m'], 'v': groups['v']}, optimizer_step=header['optimizer_step'],
                      rng=header['rng'], norm_stats=header['norm_stats'], extra=header.get('extra', {}))


@dataclass
class TrainResult:
    model: MtmModel
    history: List[Dict[str, float]]
    losses: List[float]
    step: int
    checkpoint: Optional[str] = None


def train(train_set: Sequence[Trajectory], eval_set: Sequence[Trajectory], model: MtmModel, config: TrainConfig,
          stats: Optional[NormStats] = None, metrics: Optional[MetricsWriter] = None,
          checkpoint_dir: Optional[str] = None, resume: Optional[Checkpoint] = None) -> TrainResult:
    """
    Trains ``model`` in place on normalized trajectories.

    Args:
        train_set: Normalized training trajectories.
        eval_set: Normalized held-out trajectories for the FULL/FD/ID losses.
        model (MtmModel): Model to train.
        config (TrainConfig): Optimization settings.
        stats (NormStats, optional): Stored in checkpoints.
        metrics (MetricsWriter, optional): Receives train loss, lr and held-out losses.
        checkpoint_dir (str, optional): Where interval, final and last-good checkpoints go. On a
            non-finite loss the model and optimizer are rolled back to the last state whose loss
            was finite, saved as ``last_good.mtmc``, and NonFiniteError is raised.
        resume (Checkpoint, optional): Continues from this checkpoint's step and generator states.

    Returns:
        TrainResult: The model, per-interval history and per-step losses.
    """
    if not train_set:
        raise DatasetError('train: empty training set')
    if config.segment_length != model.segment_length:
        raise ConfigError('train.segment_length', '{0} differs from model.segment_length {1}'.format(
            config.segment_length, model.segment_length))
    (batch_rng,) = seed_streams(config.seed, 1)
    params = model.named_parameters()
    optimizer = AdamW(params, config.learning_rate, config.weight_decay, config.betas, config.eps)
    start = 0
    if resume is not None:
        model.load_state_dict(resume.params)
        optimizer.state = OptimState(m={k: v.copy() for k, v in resume.moments['m'].items()},
                                     v={k: v.copy() for k, v in resume.moments['v'].items()},
                                     step=resume.optimizer_step)
        batch_rng.bit_generator.state = resume.rng['batch']
        model.dropout_rng.bit_generator.state = resume.rng['dropout']
        start = resume.step
        logger.info('resuming training at step %d', start)
    action_dim = model.config.action_dim
    dtype = model.config.dtype
    eval_batch = heldout_batch(eval_set, model.segment_length, config.eval_batch_size, config.seed,
                               action_dim, dtype) if eval_set else None
    history: List[Dict[str, float]] = []
    losses: List[float] = []
    last_path = None
    model.train()

    def rng_state() -> Dict[str, Dict]:
        return {'batch': batch_rng.bit_generator.state, 'dropout': model.dropout_rng.bit_generator.state}

    def capture(at: int, rng: Dict[str, Dict]) -> Tuple:
        moments = OptimState(m={k: v.copy() for k, v in optimizer.state.m.items()},
                             v={k: v.copy() for k, v in optimizer.state.v.items()}, step=optimizer.state.step)
        return at, model.state_dict(), moments, rng

    # the last state whose loss was finite, taken before its update
    last_good = None
    for step in range(start + 1, config.total_steps + 1):
        snapshot = rng_state()
        batch = sample_batch(train_set, config.batch_size, model.segment_length, batch_rng, action_dim, dtype)
        masks = batch_masks(config.mask_kind, config.batch_size, model.segment_length, batch_rng,
                            config.mask_ratio_range, batch.presence)
        optimizer.zero_grad()
        with dc.Tape() as tape:
            loss = masked_mse_loss(model(batch, masks), batch)
        value = loss.item()
        if not np.isfinite(value):
            if checkpoint_dir:
                good_step, good_params, good_moments, good_rng = last_good or capture(step - 1, snapshot)
                model.load_state_dict(good_params)
                optimizer.state = good_moments
                save_checkpoint(os.path.join(checkpoint_dir, 'last_good.mtmc'), model, optimizer, config,
                                good_step, stats, good_rng)
            raise NonFiniteError('train: loss became {0} at step {1}'.format(value, step))
        if checkpoint_dir:
            last_good = capture(step - 1, snapshot)
        dc.backward(tape, loss)
        if config.grad_clip:
            clip_grad_norm(list(params.values()), config.grad_clip)
        lr = lr_at_step(step, config)
        optimizer.step(lr)
        losses.append(value)
        if step % config.eval_interval == 0 or step == config.total_steps:
            row = {'step': step, 'train_loss': value, 'lr': lr}
            if eval_batch is not None:
                row.update({'eval_' + k: v for k, v in heldout_losses(model, eval_batch).items()})
            history.append(row)
            if metrics is not None:
                metrics.log_many(step, {k: v for k, v in row.items() if k != 'step'})
            logger.info('step %d: %s', step, ', '.join('{0} {1:.5g}'.format(k, v) for k, v in row.items()
                                                         if k != 'step'))
        if checkpoint_dir and config.checkpoint_interval and step % config.checkpoint_interval == 0:
            last_path = save_checkpoint(os.path.join(checkpoint_dir, 'step_{0:06d}.mtmc'.format(step)),
                                        model, optimizer, config, step, stats, rng_state())
    if checkpoint_dir:
        last_path = save_checkpoint(os.path.join(checkpoint_dir, 'final.mtmc'), model, optimizer, config,
                                    config.total_steps, stats, rng_state())
    return TrainResult(model=model, history=history, losses=losses, step=config.total_steps, checkpoint=last_path)


def train_module(module: Module, loss_fn: Callable[[np.random.Generator], Tensor], steps: int, warmup: int,
                 learning_rate: float, weight_decay: float, rng: np.random.Generator,
                 grad_clip: float = 1.0, log_every: int = 0, name: str = 'module') -> List[float]:
    """
    Generic AdamW loop with the warmup + cosine schedule, used for the baseline networks.

    ``loss_fn`` draws its own batch from ``rng`` and returns a scalar on the active tape.
    """
    schedule = TrainConfig(total_steps=steps, warmup_steps=min(warmup, steps - 1), learning_rate=learning_rate)
    params = module.named_parameters()
    optimizer = AdamW(params, learning_rate, weight_decay)
    module.train()
    losses = []
    for step in range(1, steps + 1):
        optimizer.zero_grad()
        with dc.Tape() as tape:
            loss = loss_fn(rng)
        if not np.isfinite(loss.item()):
            raise NonFiniteError('{0}: loss became {1} at step {2}'.format(name, loss.item(), step))
        dc.backward(tape, loss)
        if grad_clip:
            clip_grad_norm(list(params.values()), grad_clip)
        optimizer.step(lr_at_step(step, schedule))
        losses.append(loss.item())
        if log_every and step % log_every == 0:
            logger.info('%s step %d: loss %.5g', name, step, losses[-1])
    return losses
