"""
Experiment configuration: one dataclass per section, strict JSON loading and ``--set`` overrides.

Every field has a default, so ``{}`` is a valid config. Unknown sections or keys are
rejected with their dotted path.
"""
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type

from .baseline import BaselineConfig
from .envs import EnvConfig
from .exceptions import ConfigError, NotFoundException
from .model import ModelConfig
from .reprrl import Td3Config
from .training import TrainConfig
from .utils import get_logger, set_value_at_path

logger = get_logger('config')


@dataclass
class DatasetConfig:
    n_trajectories: int = 1000
    mixture: List[Tuple[str, float]] = field(default_factory=lambda: [('expert', 0.2), ('medium', 0.4),
                                                                       ('random', 0.4)])
    noise_std: float = 0.1
    eval_fraction: float = 0.05
    reference_episodes: int = 100
    path: str = ''

    def __post_init__(self):
        if self.n_trajectories < 2:
            raise ConfigError('dataset.n_trajectories', 'need at least 2 trajectories')
        if not 0.0 < self.eval_fraction < 1.0:
            raise ConfigError('dataset.eval_fraction', 'must lie in (0, 1)')
        self.mixture = [(str(q), float(f)) for q, f in self.mixture]
        if abs(sum(f for _, f in self.mixture) - 1.0) > 1e-9:
            raise ConfigError('dataset.mixture', 'fractions must sum to 1')


@dataclass
class EvalConfig:
    n_episodes: int = 20
    rcbc_target: Optional[float] = None
    rcbc_target_scale: Optional[float] = None
    sweep_levels: int = 5
    ablation_masks: List[str] = field(default_factory=lambda: ['random', 'random_autoregressive', 'rcbc', 'fd', 'id'])
    actioned_fraction: float = 0.01
    stateonly_fraction: float = 0.95
    data_fractions: List[float] = field(default_factory=lambda: [0.01, 0.05, 0.1, 0.5, 1.0])
    segment_lengths: List[int] = field(default_factory=lambda: [2, 4, 8])
    td3_variants: List[str] = field(default_factory=lambda: ['raw', 'mtm_state', 'mtm_state_frozen',
                                                             'mtm_state_action'])
    exploration_trajectories: int = 1000

    def __post_init__(self):
        if self.n_episodes < 1:
            raise ConfigError('eval.n_episodes', 'must be at least 1')
        if self.sweep_levels < 2:
            raise ConfigError('eval.sweep_levels', 'need at least 2 levels for a rank correlation')
        if any(not 0.0 < f <= 1.0 for f in self.data_fractions):
            raise ConfigError('eval.data_fractions', 'fractions must lie in (0, 1]')


SECTIONS: Dict[str, Type] = {
    'env': EnvConfig, 'dataset': DatasetConfig, 'model': ModelConfig, 'train': TrainConfig,
    'eval': EvalConfig, 'baseline': BaselineConfig, 'td3': Td3Config,
}


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    td3: Td3Config = field(default_factory=Td3Config)

    def __post_init__(self):
        self.model.state_dim = self.model.state_dim or self.env.state_dim
        self.model.action_dim = self.model.action_dim or self.env.action_dim
        if (self.model.state_dim, self.model.action_dim) != (self.env.state_dim, self.env.action_dim):
            raise ConfigError('model.state_dim', 'model dims {0} differ from env dims {1}'.format(
                (self.model.state_dim, self.model.action_dim), (self.env.state_dim, self.env.action_dim)))
        if self.train.segment_length != self.model.segment_length:
            raise ConfigError('train.segment_length', '{0} differs from model.segment_length {1}'.format(
                self.train.segment_length, self.model.segment_length))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def with_segment_length(self, length: int) -> 'ExperimentConfig':
        return replace(self, model=replace(self.model, segment_length=length),
                       train=replace(self.train, segment_length=length))

    def with_mask(self, kind: str) -> 'ExperimentConfig':
        return replace(self, train=replace(self.train, mask_kind=kind))


def _build_section(name: str, cls: Type, values: Any):
    if not isinstance(values, dict):
        raise ConfigError(name, 'expected an object, got {0}'.format(type(values).__name__))
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError('{0}.{1}'.format(name, key), 'unknown key')
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(name, str(exc))


def config_from_dict(payload: Dict[str, Any]) -> ExperimentConfig:
    """
    Builds an :class:`ExperimentConfig`, rejecting anything it does not know.

    Args:
        payload (dict): Section name to key/value mapping; missing keys take defaults.

    Returns:
        ExperimentConfig: Validated configuration.
    """
    if not isinstance(payload, dict):
        raise ConfigError('<root>', 'expected a JSON object')
    for name in payload:
        if name not in SECTIONS:
            raise ConfigError(name, 'unknown section')
    sections = {name: _build_section(name, cls, payload.get(name, {})) for name, cls in SECTIONS.items()}
    return ExperimentConfig(**sections)


def parse_override(text: str) -> Tuple[List[str], Any]:
    """``section.key=<json>``; values that are not valid JSON are taken as strings."""
    if '=' not in text:
        raise ConfigError(text, 'override must look like section.key=value')
    path, raw = text.split('=', 1)
    keys = [k for k in path.strip().split('.') if k]
    if len(keys) < 2:
        raise ConfigError(path, 'override must name a section and a key')
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return keys, value


def load_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    payload: Dict[str, Any] = {}
    if path:
        try:
            with open(path) as f:
                payload = json.load(f)
        except FileNotFoundError:
            raise NotFoundException('config file {0} does not exist'.format(path))
        except ValueError as exc:
            raise ConfigError(path, 'invalid JSON ({0})'.format(exc))
    for text in overrides:
        keys, value = parse_override(text)
        set_value_at_path(payload, keys, value)
    config = config_from_dict(payload)
    logger.debug('loaded config from %s with %d overrides', path or 'defaults', len(overrides))
    return config
