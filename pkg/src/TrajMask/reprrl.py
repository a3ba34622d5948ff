"""
Offline TD3 on raw states or on representations from a pretrained masked trajectory model.

The actor always sees ``encode_state`` features in the representation modes; the critic sees
``encode_state`` features concatenated with the action (``mtm_state``) or the joint
``encode_state_action`` embedding (``mtm_state_action``). With ``finetune`` the encoder is
optimized together with the critics and has its own polyak-averaged target copy.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .constants import ACTION, REPRESENTATIONS, STATE
from .diffcore import Tensor
from .envs import EnvConfig, env_reset, env_step, normalized_score
from .exceptions import ConfigError, DatasetError, NonFiniteError
from .layers import MLP, Module, polyak_update
from .metrics import MetricsWriter
from .model import MtmModel
from .trajdata import NormStats, Trajectory
from .training import AdamW
from .utils import get_logger, seed_streams

logger = get_logger('reprrl')


@dataclass
class Td3Config:
    discount: float = 0.99
    polyak: float = 0.005
    policy_delay: int = 2
    target_noise: float = 0.2
    noise_clip: float = 0.5
    actor_layers: int = 2
    actor_width: int = 256
    critic_layers: int = 2
    critic_width: int = 256
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    batch_size: int = 256
    total_updates: int = 20000
    eval_interval: int = 1000
    eval_episodes: int = 10
    representation: str = 'raw'
    finetune: bool = True
    precision: str = 'float64'
    seed: int = 0

    def __post_init__(self):
        if self.policy_delay < 1:
            raise ConfigError('td3.policy_delay', 'must be at least 1')
        if not 0.0 < self.polyak <= 1.0:
            raise ConfigError('td3.polyak', 'must lie in (0, 1]')
        if self.representation not in REPRESENTATIONS:
            raise ConfigError('td3.representation', 'expected one of {0}'.format(list(REPRESENTATIONS)))
        if self.precision not in ('float32', 'float64'):
            raise ConfigError('td3.precision', 'expected float32 or float64')

    @property
    def dtype(self):
        return np.float32 if self.precision == 'float32' else np.float64


def _state_tokens(model: MtmModel, states: Tensor) -> Tensor:
    return model.embed_cell(STATE, states, 0)


def encode_state(model: MtmModel, states) -> Tensor:
    """
    Encoder latent of a one-token sequence holding each state at the first timestep.

    Args:
        model (MtmModel): Pretrained model.
        states: (B, ds) normalized states, array or tensor.

    Returns:
        Tensor: (B, embed_dim).
    """
    states = states if isinstance(states, Tensor) else Tensor(np.asarray(states, dtype=model.config.dtype))
    b = states.shape[0]
    token = dc.reshape(_state_tokens(model, states), (b, 1, model.config.embed_dim))
    return dc.reshape(model.encode_sequence(token), (b, model.config.embed_dim))


def encode_state_action(model: MtmModel, states, actions) -> Tensor:
    """Latents of the (state, action) tokens at the first timestep, concatenated: (B, 2 * embed_dim)."""
    dtype = model.config.dtype
    states = states if isinstance(states, Tensor) else Tensor(np.asarray(states, dtype=dtype))
    actions = actions if isinstance(actions, Tensor) else Tensor(np.asarray(actions, dtype=dtype))
    b, d = states.shape[0], model.config.embed_dim
    tokens = dc.concat([dc.reshape(_state_tokens(model, states), (b, 1, d)),
                        dc.reshape(model.embed_cell(ACTION, actions, 0), (b, 1, d))], axis=1)
    return dc.reshape(model.encode_sequence(tokens), (b, 2 * d))


class Td3Agent:
    """
    Actor, twin critics and their target copies, plus the optional representation encoder.

    Args:
        state_dim (int): Raw state size.
        action_dim (int): Action size.
        action_bound (float): Actions are ``tanh`` outputs scaled to this bound.
        config (Td3Config): Network sizes and update settings.
        encoder (MtmModel, optional): Pretrained model for the representation modes.
        stats (NormStats, optional): Normalization applied to states (and encoder actions).
        seed (int): Initialization seed.
    """

    def __init__(self, state_dim: int, action_dim: int, action_bound: float, config: Td3Config,
                 encoder: Optional[MtmModel] = None, stats: Optional[NormStats] = None, seed: int = 0):
        if config.representation != 'raw' and encoder is None:
            raise ConfigError('td3.representation', '{0} needs a pretrained model'.format(config.representation))
        self.config = config
        self.action_dim = action_dim
        self.action_bound = action_bound
        self.stats = stats
        self.updates = 0
        dtype = config.dtype
        (rng,) = seed_streams(seed, 1)
        feature_dim = state_dim if config.representation == 'raw' else encoder.config.embed_dim
        critic_in = feature_dim + action_dim
        if config.representation == 'mtm_state_action':
            critic_in = 2 * encoder.config.embed_dim
        self.actor = MLP(feature_dim, [config.actor_width] * config.actor_layers, action_dim, rng,
                         activation='relu', init='fan_in', dtype=dtype)
        self.critic1 = MLP(critic_in, [config.critic_width] * config.critic_layers, 1, rng,
                           activation='relu', init='fan_in', dtype=dtype)
        self.critic2 = MLP(critic_in, [config.critic_width] * config.critic_layers, 1, rng,
                           activation='relu', init='fan_in', dtype=dtype)
        self.actor_target = self.actor.clone()
        self.critic1_target = self.critic1.clone()
        self.critic2_target = self.critic2.clone()
        self.encoder = encoder
        self.encoder_target: Optional[MtmModel] = None
        if encoder is not None:
            encoder.eval()
            if config.finetune:
                self.encoder_target = encoder.clone()
        self.actor_optim = AdamW(self.actor.named_parameters(), config.actor_lr)
        critic_params = {}
        critic_params.update(self.critic1.named_parameters('critic1.'))
        critic_params.update(self.critic2.named_parameters('critic2.'))
        if encoder is not None and config.finetune:
            critic_params.update(encoder.named_parameters('encoder.'))
        self.critic_optim = AdamW(critic_params, config.critic_lr)

    def _modules(self) -> List[Module]:
        mods: List[Module] = [self.actor, self.critic1, self.critic2]
        if self.encoder is not None:
            mods.append(self.encoder)
        return mods

    def zero_grad(self) -> None:
        for module in self._modules():
            module.zero_grad()

    def normalize_states(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        if self.stats is not None:
            mean, std = self.stats.arrays('state')
            states = (states - mean) / std
        return states.astype(self.config.dtype)

    def _encoder_actions(self, actions: Tensor) -> Tensor:
        if self.stats is None:
            return actions
        mean, std = self.stats.arrays('action')
        return dc.mul(dc.sub(actions, mean.astype(actions.dtype)), (1.0 / std).astype(actions.dtype))

    def _detach(self, t: Tensor) -> Tensor:
        return t if self.config.finetune else Tensor(t.data)

    def state_features(self, states: np.ndarray, target: bool = False) -> Tensor:
        s = Tensor(states)
        if self.config.representation == 'raw':
            return s
        encoder = self.encoder_target if target and self.encoder_target is not None else self.encoder
        return self._detach(encode_state(encoder, s))

    def critic_features(self, states: np.ndarray, actions: Tensor, target: bool = False) -> Tensor:
        mode = self.config.representation
        if mode == 'mtm_state_action':
            encoder = self.encoder_target if target and self.encoder_target is not None else self.encoder
            # frozen encoders still pass the actor gradient through the action token
            return encode_state_action(encoder, Tensor(states), self._encoder_actions(actions))
        return dc.concat([self.state_features(states, target), actions], axis=1)

    def policy(self, states: np.ndarray, target: bool = False) -> Tensor:
        actor = self.actor_target if target else self.actor
        return dc.scale(dc.tanh(actor(self.state_features(states, target))), self.action_bound)

    def act(self, raw_states: np.ndarray) -> np.ndarray:
        """Deterministic policy actions for raw environment states."""
        return self.policy(self.normalize_states(raw_states)).data.astype(np.float64)


@dataclass
class TransitionBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    not_done: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]

    def take(self, index: np.ndarray) -> 'TransitionBatch':
        return TransitionBatch(self.states[index], self.actions[index], self.rewards[index],
                               self.next_states[index], self.not_done[index])


def make_transitions(trajectories: Sequence[Trajectory]) -> TransitionBatch:
    """
    ``(s, a, r, s')`` from every timestep but the last of each trajectory.

    Episodes end by time limit, so ``not_done`` is 1 throughout.
    """
    if any(t.actions is None for t in trajectories):
        raise DatasetError('td3: every trajectory needs actions')
    states = np.concatenate([t.states[:-1] for t in trajectories]).astype(np.float64)
    actions = np.concatenate([t.actions[:-1] for t in trajectories]).astype(np.float64)
    rewards = np.concatenate([t.rewards[:-1] for t in trajectories]).astype(np.float64)[:, None]
    next_states = np.concatenate([t.states[1:] for t in trajectories]).astype(np.float64)
    return TransitionBatch(states, actions, rewards, next_states, np.ones_like(rewards))


def td3_update(agent: Td3Agent, batch: TransitionBatch, config: Td3Config,
               rng: np.random.Generator) -> Dict[str, float]:
    """
    One TD3 update: clipped double-Q critic regression, then (every ``policy_delay`` updates)
    the actor step and polyak averaging of every target copy.

    Args:
        agent (Td3Agent): Agent updated in place.
        batch (TransitionBatch): Raw transitions.
        config (Td3Config): Update settings.
        rng (np.random.Generator): Target-smoothing noise.

    Returns:
        Dict[str, float]: ``critic_loss``, ``q_mean`` and, on actor steps, ``actor_loss``.
    """
    dtype = config.dtype
    agent.updates += 1
    states = agent.normalize_states(batch.states)
    next_states = agent.normalize_states(batch.next_states)
    actions = Tensor(np.asarray(batch.actions, dtype=dtype))
    bound = agent.action_bound

    noise = rng.normal(0.0, config.target_noise * bound, size=batch.actions.shape) if config.target_noise else \
        np.zeros(batch.actions.shape)
    noise = np.clip(noise, -config.noise_clip * bound, config.noise_clip * bound)
    next_actions = np.clip(agent.policy(next_states, target=True).data + noise, -bound, bound).astype(dtype)
    target_in = agent.critic_features(next_states, Tensor(next_actions), target=True)
    q_next = np.minimum(agent.critic1_target(target_in).data, agent.critic2_target(target_in).data)
    y = np.asarray(batch.rewards, dtype=dtype) + config.discount * np.asarray(batch.not_done, dtype=dtype) * q_next
    if not np.all(np.isfinite(y)):
        raise NonFiniteError('td3_update: critic target is not finite at update {0}'.format(agent.updates))

    agent.zero_grad()
    with dc.Tape() as tape:
        critic_in = agent.critic_features(states, actions)
        q1 = agent.critic1(critic_in)
        q2 = agent.critic2(critic_in)
        critic_loss = dc.add(dc.mse(q1, y), dc.mse(q2, y))
    dc.backward(tape, critic_loss)
    agent.critic_optim.step()
    diagnostics = {'critic_loss': critic_loss.item(), 'q_mean': float(q1.data.mean())}

    if agent.updates % config.policy_delay == 0:
        agent.zero_grad()
        with dc.Tape() as tape:
            pi = agent.policy(states)
            actor_loss = dc.scale(dc.mean(agent.critic1(agent.critic_features(states, pi))), -1.0)
        dc.backward(tape, actor_loss)
        agent.actor_optim.step()
        diagnostics['actor_loss'] = actor_loss.item()
        polyak_update(agent.actor_target, agent.actor, config.polyak)
        polyak_update(agent.critic1_target, agent.critic1, config.polyak)
        polyak_update(agent.critic2_target, agent.critic2, config.polyak)
        if agent.encoder_target is not None:
            polyak_update(agent.encoder_target, agent.encoder, config.polyak)
    return diagnostics


def evaluate_policy(agent: Td3Agent, env: EnvConfig, n_episodes: int, seed: int) -> np.ndarray:
    """Returns of ``n_episodes`` deterministic-policy episodes run in lockstep."""
    streams = seed_streams(seed, n_episodes)
    states = np.stack([env_reset(env, rng) for rng in streams])
    returns = np.zeros(n_episodes)
    for _ in range(env.horizon):
        actions = agent.act(states)
        for i, rng in enumerate(streams):
            states[i], reward = env_step(states[i], actions[i], env, rng)
            returns[i] += reward
    return returns


@dataclass
class Td3Result:
    agent: Td3Agent
    curve: List[Dict[str, float]] = field(default_factory=list)


def td3_train_offline(trajectories: Sequence[Trajectory], env: EnvConfig, config: Td3Config,
                      model: Optional[MtmModel] = None, stats: Optional[NormStats] = None,
                      references: Optional[Dict[str, float]] = None,
                      metrics: Optional[MetricsWriter] = None) -> Td3Result:
    """
    Trains TD3 purely from ``trajectories`` and evaluates the deterministic policy periodically.

    Args:
        trajectories: Transitions with rewards already relabeled for the evaluation task.
        env (EnvConfig): Environment used for evaluation episodes.
        config (Td3Config): TD3 settings, including the representation mode.
        model (MtmModel, optional): Pretrained model for the representation modes; finetuning
            updates it in place.
        stats (NormStats, optional): State normalization.
        references (dict, optional): Reference returns for normalized scores.
        metrics (MetricsWriter, optional): Receives the learning curve.

    Returns:
        Td3Result: The agent and its learning curve.
    """
    transitions = make_transitions(trajectories)
    init_seed = int(np.random.SeedSequence(config.seed).generate_state(1)[0])
    agent = Td3Agent(env.state_dim, env.action_dim, env.action_bound, config, model, stats, init_seed)
    batch_rng, noise_rng = seed_streams(config.seed, 2)
    curve = []
    mode = config.representation + ('' if config.finetune or config.representation == 'raw' else '_frozen')
    logger.info('td3 (%s): %d transitions, %d updates', mode, len(transitions), config.total_updates)
    for update in range(1, config.total_updates + 1):
        index = batch_rng.integers(0, len(transitions), size=config.batch_size)
        diagnostics = td3_update(agent, transitions.take(index), config, noise_rng)
        if update % config.eval_interval == 0 or update == config.total_updates:
            returns = evaluate_policy(agent, env, config.eval_episodes, config.seed)
            point = {'update': update, 'mean_return': float(returns.mean()), 'critic_loss': diagnostics['critic_loss']}
            if references is not None:
                point['normalized_score'] = normalized_score(point['mean_return'], references['random'],
                                                             references['expert'])
            curve.append(point)
            if metrics is not None:
                metrics.log_many(update, {k: v for k, v in point.items() if k != 'update'},
                                 {'representation': mode})
            logger.info('td3 (%s) update %d: mean return %.4f', mode, update, point['mean_return'])
    return Td3Result(agent=agent, curve=curve)
