"""
Synthetic continuous-control environments and scripted data-collection policies.

``point_mass``: state ``(px, py, vx, vy)``, action = acceleration, Euler integration with
clipped velocity. ``linear_system``: ``s' = A s + B a + noise``. Both are small enough that a
full dataset is generated in seconds and the zero-noise linear system is an exact oracle for
forward and inverse dynamics.
"""
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigError, DatasetError, DegenerateReferenceError, NonFiniteError, UnknownKindError
from .trajdata import Trajectory, compute_rtg
from .utils import get_logger, seed_streams

logger = get_logger('envs')

ENV_KINDS = ('point_mass', 'linear_system')
TASKS = {'point_mass': ('reach', 'still', 'dash'), 'linear_system': ('regulate',)}

PD_GAIN_POSITION = 1.0
PD_GAIN_VELOCITY = 1.5
MEDIUM_NOISE_MULTIPLIER = 8.0


@dataclass
class EnvConfig:
    kind: str = 'point_mass'
    state_dim: int = 0
    action_dim: int = 0
    horizon: int = 0
    dt: float = 0.1
    action_bound: float = 1.0
    noise_std: Optional[float] = None
    goal: List[float] = field(default_factory=lambda: [1.0, 0.5])
    velocity_limit: float = 2.0
    spectral_radius: float = 0.95
    A: Optional[List[List[float]]] = None
    B: Optional[List[List[float]]] = None
    task: str = ''
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise ConfigError('env.kind', 'unknown environment {0!r}'.format(self.kind))
        if self.kind == 'point_mass':
            self.state_dim = self.state_dim or 4
            self.action_dim = self.action_dim or 2
            self.horizon = self.horizon or 64
            self.task = self.task or 'reach'
            if self.noise_std is None:
                self.noise_std = 0.0
            if self.state_dim != 4 or self.action_dim != 2:
                raise ConfigError('env.state_dim', 'point_mass is fixed at state_dim 4, action_dim 2')
            if len(self.goal) != 2:
                raise ConfigError('env.goal', 'point_mass goal must have 2 coordinates')
        else:
            self.state_dim = self.state_dim or 6
            self.action_dim = self.action_dim or 2
            self.horizon = self.horizon or 32
            self.task = self.task or 'regulate'
            if self.noise_std is None:
                self.noise_std = 0.01
            if self.A is None or self.B is None:
                a, b = random_stable_system(self.state_dim, self.action_dim, self.spectral_radius,
                                            np.random.default_rng(self.seed))
                self.A = a.tolist() if self.A is None else self.A
                self.B = b.tolist() if self.B is None else self.B
            a = np.asarray(self.A, dtype=np.float64)
            if a.shape != (self.state_dim, self.state_dim):
                raise ConfigError('env.A', 'expected shape {0}'.format((self.state_dim, self.state_dim)))
            if np.asarray(self.B).shape != (self.state_dim, self.action_dim):
                raise ConfigError('env.B', 'expected shape {0}'.format((self.state_dim, self.action_dim)))
            if np.max(np.abs(np.linalg.eigvals(a))) > 1.05:
                raise ConfigError('env.A', 'spectral radius exceeds 1.05')
        if self.task not in TASKS[self.kind]:
            raise ConfigError('env.task', '{0!r} is not a {1} task'.format(self.task, self.kind))

    @property
    def A_matrix(self) -> np.ndarray:
        return np.asarray(self.A, dtype=np.float64)

    @property
    def B_matrix(self) -> np.ndarray:
        return np.asarray(self.B, dtype=np.float64)

    def with_task(self, task: str) -> 'EnvConfig':
        return replace(self, task=task)


@dataclass
class ScriptedPolicySpec:
    quality: str = 'expert'
    noise_std: float = 0.1
    mixture: List[Tuple[str, float]] = field(default_factory=list)

    def __post_init__(self):
        if not self.mixture:
            self.mixture = [(self.quality, 1.0)]
        self.mixture = [(str(q), float(f)) for q, f in self.mixture]
        for quality, _ in self.mixture:
            if quality not in ('expert', 'medium', 'random'):
                raise UnknownKindError('unknown policy quality {0!r}'.format(quality))
        if abs(sum(f for _, f in self.mixture) - 1.0) > 1e-9:
            raise DatasetError('mixture fractions must sum to 1, got {0}'.format(self.mixture))


def random_stable_system(state_dim: int, action_dim: int, spectral_radius: float,
                         rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    a = rng.normal(size=(state_dim, state_dim))
    a *= spectral_radius / np.max(np.abs(np.linalg.eigvals(a)))
    b = rng.normal(size=(state_dim, action_dim)) / np.sqrt(state_dim)
    return a, b


def env_reset(config: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    if config.kind == 'point_mass':
        position = rng.uniform(-1.0, 1.0, size=2)
        velocity = rng.uniform(-0.5, 0.5, size=2)
        return np.concatenate([position, velocity])
    return rng.normal(size=config.state_dim)


def task_reward(config: EnvConfig, next_state: np.ndarray) -> float:
    if config.kind == 'linear_system':
        return -float(next_state @ next_state)
    if config.task == 'reach':
        return -float(np.linalg.norm(next_state[:2] - np.asarray(config.goal, dtype=np.float64)))
    if config.task == 'still':
        return -float(np.linalg.norm(next_state[2:]))
    return float(next_state[2])


def env_step(state: np.ndarray, action: np.ndarray, config: EnvConfig,
             rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, float]:
    """
    Advances the environment one step.

    Args:
        state (np.ndarray): Current state.
        action (np.ndarray): Action; entries are clipped to the action bound.
        config (EnvConfig): Environment definition.
        rng (np.random.Generator, optional): Process-noise stream; required when noise_std > 0.

    Returns:
        Tuple[np.ndarray, float]: Next state and reward.
    """
    state = np.asarray(state, dtype=np.float64)
    if not np.all(np.isfinite(state)):
        raise NonFiniteError('env_step: state contains non-finite values')
    action = np.clip(np.asarray(action, dtype=np.float64), -config.action_bound, config.action_bound)
    noise_std = config.noise_std or 0.0
    if config.kind == 'point_mass':
        p, v = state[:2], state[2:]
        p_next = p + v * config.dt
        v_next = np.clip(v + action * config.dt, -config.velocity_limit, config.velocity_limit)
        next_state = np.concatenate([p_next, v_next])
    else:
        next_state = config.A_matrix @ state + config.B_matrix @ action
    if noise_std > 0:
        if rng is None:
            raise ConfigError('env.noise_std', 'env_step needs a noise generator when noise_std > 0')
        next_state = next_state + rng.normal(scale=noise_std, size=next_state.shape)
    return next_state, task_reward(config, next_state)


def expert_action(state: np.ndarray, config: EnvConfig) -> np.ndarray:
    """Noise-free scripted expert for the configured task."""
    if config.kind == 'linear_system':
        action = -least_squares_gain(config) @ state
    elif config.task == 'reach':
        p, v = state[:2], state[2:]
        action = PD_GAIN_POSITION * (np.asarray(config.goal) - p) - PD_GAIN_VELOCITY * v
    elif config.task == 'still':
        action = -PD_GAIN_VELOCITY * state[2:] / config.dt
    else:
        action = np.array([config.action_bound, -PD_GAIN_VELOCITY * state[3]])
    return np.clip(action, -config.action_bound, config.action_bound)


def least_squares_gain(config: EnvConfig) -> np.ndarray:
    return np.linalg.pinv(config.B_matrix) @ config.A_matrix


def inverse_dynamics_oracle(state: np.ndarray, next_state: np.ndarray, config: EnvConfig) -> np.ndarray:
    """Least-squares action ``B^+ (s' - A s)`` for the linear system."""
    return np.linalg.pinv(config.B_matrix) @ (np.asarray(next_state) - config.A_matrix @ np.asarray(state))


def policy_action(quality: str, state: np.ndarray, config: EnvConfig, noise_std: float,
                  rng: np.random.Generator) -> np.ndarray:
    if quality == 'random':
        return rng.uniform(-config.action_bound, config.action_bound, size=config.action_dim)
    if quality == 'expert':
        scale = noise_std
    elif quality == 'medium':
        scale = noise_std * MEDIUM_NOISE_MULTIPLIER
    else:
        raise UnknownKindError('unknown policy quality {0!r}'.format(quality))
    action = expert_action(state, config) + rng.normal(scale=scale, size=config.action_dim)
    return np.clip(action, -config.action_bound, config.action_bound)


def rollout_scripted(quality: str, config: EnvConfig, noise_std: float,
                     rng: np.random.Generator) -> Trajectory:
    state = env_reset(config, rng)
    states = np.zeros((config.horizon, config.state_dim))
    actions = np.zeros((config.horizon, config.action_dim))
    rewards = np.zeros(config.horizon)
    for t in range(config.horizon):
        action = policy_action(quality, state, config, noise_std, rng)
        states[t], actions[t] = state, action
        state, rewards[t] = env_step(state, action, config, rng)
    rewards32 = rewards.astype(np.float32)
    return Trajectory(states=states.astype(np.float32), actions=actions.astype(np.float32),
                      rewards=rewards32, rtg=compute_rtg(rewards32), tier=quality)


def _tier_schedule(mixture: Sequence[Tuple[str, float]], n: int, rng: np.random.Generator) -> List[str]:
    counts = [int(np.floor(f * n)) for _, f in mixture]
    remainders = [f * n - c for (_, f), c in zip(mixture, counts)]
    for i in np.argsort(remainders)[::-1][: n - sum(counts)]:
        counts[i] += 1
    labels = [q for (q, _), c in zip(mixture, counts) for _ in range(c)]
    return [labels[i] for i in rng.permutation(n)]


def generate_dataset(config: EnvConfig, policy: ScriptedPolicySpec, n_traj: int, seed: int) -> List[Trajectory]:
    """
    Rolls out scripted policies to build a trajectory set.

    Args:
        config (EnvConfig): Environment definition.
        policy (ScriptedPolicySpec): Tier or tier mixture to collect with.
        n_traj (int): Number of trajectories.
        seed (int): Root seed; each trajectory draws from its own derived stream.

    Returns:
        List[Trajectory]: ``n_traj`` complete trajectories of length ``config.horizon``.
    """
    if n_traj < 1:
        raise DatasetError('generate_dataset: n_traj must be at least 1, got {0}'.format(n_traj))
    streams = seed_streams(seed, n_traj + 1)
    tiers = _tier_schedule(policy.mixture, n_traj, streams[0])
    logger.debug('generating %d %s trajectories (mixture %s)', n_traj, config.kind, policy.mixture)
    return [rollout_scripted(tier, config, policy.noise_std, rng) for tier, rng in zip(tiers, streams[1:])]


def evaluate_scripted(quality: str, config: EnvConfig, n_episodes: int, seed: int,
                      noise_std: float = 0.1) -> np.ndarray:
    streams = seed_streams(seed, n_episodes)
    returns = []
    for rng in streams:
        state = env_reset(config, rng)
        total = 0.0
        for _ in range(config.horizon):
            state, reward = env_step(state, policy_action(quality, state, config, noise_std, rng), config, rng)
            total += reward
        returns.append(total)
    return np.asarray(returns)


def reference_returns(config: EnvConfig, n_episodes: int = 100, seed: int = 0) -> Dict[str, float]:
    """Mean returns of the random and (noise-free) expert tiers; the normalized-score anchors."""
    random_ref = float(evaluate_scripted('random', config, n_episodes, seed).mean())
    expert_ref = float(evaluate_scripted('expert', config, n_episodes, seed, noise_std=0.0).mean())
    return {'random': random_ref, 'expert': expert_ref}


def normalized_score(raw_return: float, random_ref: float, expert_ref: float) -> float:
    if expert_ref == random_ref:
        raise DegenerateReferenceError(
            'normalized_score: expert and random references are both {0}'.format(expert_ref))
    return 100.0 * (raw_return - random_ref) / (expert_ref - random_ref)


def relabel_rewards(trajectories: Sequence[Trajectory], config: EnvConfig) -> List[Trajectory]:
    """
    Recomputes rewards for ``config.task`` from stored (state, action) pairs.

    Uses the noiseless dynamics to recover next states, so the result is exact for
    deterministic environments. Trajectories without actions cannot be relabeled.
    """
    clean = replace(config, noise_std=0.0)
    relabeled = []
    for traj in trajectories:
        if traj.actions is None:
            raise DatasetError('relabel_rewards: trajectory without actions')
        rewards = np.array([env_step(s, a, clean)[1] for s, a in zip(
            traj.states.astype(np.float64), traj.actions.astype(np.float64))], dtype=np.float32)
        relabeled.append(replace(traj, rewards=rewards,
                                 rtg=compute_rtg(rewards) if traj.rtg is not None else None))
    return relabeled
