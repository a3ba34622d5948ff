"""Glue between configuration and the library: datasets, models, training runs and run directories."""
import os
import time
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ExperimentConfig
from .envs import EnvConfig, ScriptedPolicySpec, generate_dataset, reference_returns
from .metrics import MetricsWriter, RunManifest, output_root, write_config_snapshot
from .model import MtmModel
from .trajdata import (DatasetManifest, NormStats, Trajectory, TrajectoryDataset, fit_norm_stats, load_dataset,
                       normalize, split_indices)
from .training import Checkpoint, TrainResult, train
from .utils import get_logger, stable_hash

logger = get_logger('pipeline')


@dataclass
class Run:
    directory: str
    metrics: MetricsWriter
    manifest: RunManifest

    def path(self, name: str) -> str:
        return os.path.join(self.directory, name)

    def finish(self) -> None:
        self.manifest.finished = time.time()
        self.manifest.write(self.directory)
        logger.info('run %s finished; artifacts in %s', self.manifest.run_id, self.directory)


def start_run(command: str, config: ExperimentConfig, seed: int, out: Optional[str] = None) -> Run:
    """
    Creates ``<out>/<command>-<config hash>-s<seed>/`` with a config snapshot, a manifest and
    an empty metrics CSV.
    """
    payload = config.to_dict()
    config_hash = stable_hash(payload)
    run_id = '{0}-{1}-s{2}'.format(command, config_hash[:8], seed)
    directory = os.path.join(output_root(out), run_id)
    os.makedirs(directory, exist_ok=True)
    metrics_path = os.path.join(directory, 'metrics.csv')
    if os.path.exists(metrics_path):
        os.remove(metrics_path)
    write_config_snapshot(directory, payload)
    manifest = RunManifest(run_id=run_id, command=command, seed=seed, config_hash=config_hash,
                           artifacts={'metrics': 'metrics.csv', 'config': 'config.json'})
    manifest.write(directory)
    logger.info('starting %s (seed %d) in %s', command, seed, directory)
    return Run(directory=directory, metrics=MetricsWriter(metrics_path, run_id, seed, {'command': command}),
               manifest=manifest)


def build_dataset(config: ExperimentConfig, seed: int, env: Optional[EnvConfig] = None,
                  mixture: Optional[Sequence[Tuple[str, float]]] = None,
                  n_trajectories: Optional[int] = None) -> TrajectoryDataset:
    """
    Generates trajectories, splits them, fits normalization on the training split and
    measures reference returns.
    """
    env = env or config.env
    ds = config.dataset
    policy = ScriptedPolicySpec(noise_std=ds.noise_std, mixture=list(mixture or ds.mixture))
    n = n_trajectories or ds.n_trajectories
    trajectories = generate_dataset(env, policy, n, seed)
    train_idx, eval_idx = split_indices(n, ds.eval_fraction, seed)
    stats = fit_norm_stats([trajectories[i] for i in train_idx], env.action_dim)
    refs = reference_returns(env, ds.reference_episodes, seed)
    env_payload = asdict(env)
    manifest = DatasetManifest(
        env_hash=stable_hash(env_payload), env=env_payload,
        counts={'trajectories': n, 'train': len(train_idx), 'eval': len(eval_idx)},
        train_indices=train_idx, eval_indices=eval_idx, norm_stats=stats.to_dict(),
        random_ref=refs['random'], expert_ref=refs['expert'], tiers=[t.tier for t in trajectories])
    logger.info('dataset: %d %s trajectories (%d train / %d eval), references random %.3f expert %.3f',
                n, env.kind, len(train_idx), len(eval_idx), refs['random'], refs['expert'])
    return TrajectoryDataset(trajectories=trajectories, manifest=manifest)


def dataset_for(config: ExperimentConfig, seed: int) -> TrajectoryDataset:
    """The configured dataset file when ``dataset.path`` is set, otherwise a freshly generated one."""
    if config.dataset.path:
        return load_dataset(config.dataset.path)
    return build_dataset(config, seed)


def references(dataset: TrajectoryDataset) -> Dict[str, float]:
    return {'random': dataset.manifest.random_ref, 'expert': dataset.manifest.expert_ref}


def normalized_splits(train_set: Sequence[Trajectory], eval_set: Sequence[Trajectory],
                      action_dim: int) -> Tuple[List[Trajectory], List[Trajectory], NormStats]:
    """Normalizes both splits with statistics fitted on ``train_set`` only."""
    stats = fit_norm_stats(train_set, action_dim)
    return normalize(train_set, stats), normalize(eval_set, stats), stats


def build_model(config: ExperimentConfig, seed: int) -> MtmModel:
    return MtmModel(config.model, seed=seed)


def train_model(config: ExperimentConfig, train_set: Sequence[Trajectory], eval_set: Sequence[Trajectory],
                seed: int, metrics: Optional[MetricsWriter] = None, checkpoint_dir: Optional[str] = None,
                resume: Optional[Checkpoint] = None) -> Tuple[TrainResult, NormStats]:
    """
    Normalizes the splits, builds a model for ``seed`` and trains it with ``config.train``.

    Returns:
        Tuple[TrainResult, NormStats]: Training outcome and the statistics the model expects.
    """
    train_n, eval_n, stats = normalized_splits(train_set, eval_set, config.env.action_dim)
    if resume is not None and resume.norm_stats is not None:
        stats = resume.stats()
        train_n, eval_n = normalize(train_set, stats), normalize(eval_set, stats)
    model = build_model(config, seed)
    train_config = replace(config.train, seed=seed)
    logger.info('training %s with mask %s for %d steps', model.describe(), train_config.mask_kind,
                train_config.total_steps)
    result = train(train_n, eval_n, model, train_config, stats, metrics, checkpoint_dir, resume)
    return result, stats


def subset(trajectories: Sequence[Trajectory], fraction: float, seed: int) -> List[Trajectory]:
    """A seeded random ``fraction`` of the trajectories, at least one."""
    n = max(1, int(round(fraction * len(trajectories))))
    order = np.random.default_rng([seed, 2]).permutation(len(trajectories))
    return [trajectories[i] for i in sorted(order[:n].tolist())]
