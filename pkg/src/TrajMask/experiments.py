"""
Experiment suites behind the CLI commands.

Every suite takes a validated :class:`ExperimentConfig`, a seed and a :class:`MetricsWriter`,
logs its measurements as metric rows and returns a one-row-per-variant summary frame.
"""
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .baseline import baseline_mlp
from .capabilities import (EvalReport, Reconstructor, capability_loss, persistence_loss, rcbc_target_sweep,
                           resolve_target_return, rollout_eval)
from .config import ExperimentConfig
from .envs import reference_returns, relabel_rewards
from .exceptions import DatasetError
from .metrics import MetricsWriter
from .model import MtmModel
from .pipeline import build_dataset, references, subset, train_model
from .reprrl import td3_train_offline
from .trajdata import NormStats, Trajectory, TrajectoryDataset, fit_norm_stats, make_heteromodal, normalize
from .training import heldout_batch
from .utils import get_logger

logger = get_logger('experiments')

TD3_VARIANTS = {
    'raw': ('raw', True),
    'mtm_state': ('mtm_state', True),
    'mtm_state_frozen': ('mtm_state', False),
    'mtm_state_action': ('mtm_state_action', True),
}


def _dataset_best(trajectories: Sequence[Trajectory]) -> float:
    return float(max(np.sum(t.rewards) for t in trajectories))


def behavior_return(trajectories: Sequence[Trajectory]) -> float:
    """Mean undiscounted return of the trajectories in a dataset."""
    return float(np.mean([np.sum(t.rewards) for t in trajectories]))


def target_return(config: ExperimentConfig, dataset: TrajectoryDataset) -> float:
    return resolve_target_return(references(dataset), config.eval.rcbc_target, config.eval.rcbc_target_scale,
                                 _dataset_best(dataset.train_split()))


def heldout_capability_losses(model: Reconstructor, stats: NormStats, eval_set: Sequence[Trajectory],
                              config: ExperimentConfig, seed: int, kinds: Sequence[str] = ('FD', 'ID')) -> Dict[str, float]:
    """Normalized-unit held-out losses for each kind, plus the persistence reference for FD."""
    if model.segment_length < 2:
        return {}
    usable = [t for t in normalize(eval_set, stats) if t.actions is not None]
    if not usable:
        raise DatasetError('held-out evaluation needs trajectories with actions')
    batch = heldout_batch(usable, model.segment_length, config.train.eval_batch_size, seed,
                          config.env.action_dim, config.model.dtype)
    losses = {kind + '_loss': capability_loss(model, batch, kind) for kind in kinds}
    if 'FD' in kinds:
        losses['FD_persistence_loss'] = persistence_loss(batch)
    return losses


def rollout_scores(model: Reconstructor, stats: NormStats, config: ExperimentConfig, dataset: TrajectoryDataset,
                   seed: int, modes: Sequence[str] = ('BC', 'RCBC')) -> Dict[str, EvalReport]:
    target = target_return(config, dataset)
    return {mode: rollout_eval(model, stats, config.env, mode, None if mode == 'BC' else target,
                               config.eval.n_episodes, seed, references(dataset))
            for mode in modes}


def _score_metrics(reports: Dict[str, EvalReport]) -> Dict[str, float]:
    values = {}
    for mode, report in reports.items():
        values[mode + '_return'] = report.metrics['mean_return']
        values[mode + '_score'] = report.metrics['normalized_score']
    return values


def eval_capabilities(model: MtmModel, stats: NormStats, dataset: TrajectoryDataset, config: ExperimentConfig,
                      seed: int, metrics: Optional[MetricsWriter] = None,
                      with_baselines: bool = False) -> EvalReport:
    """
    The four-capability report of one model: BC and RCBC rollout scores, FD and ID held-out
    losses, the RCBC target sweep and the reference returns.

    Args:
        model (MtmModel): Trained model.
        stats (NormStats): Statistics the model was trained with.
        dataset (TrajectoryDataset): Source of the held-out split and reference returns.
        config (ExperimentConfig): Evaluation settings.
        seed (int): Evaluation seed.
        metrics (MetricsWriter, optional): Receives every reported value.
        with_baselines (bool): Also trains the specialized MLP baselines and reports them.

    Returns:
        EvalReport: ``capability='CAPABILITIES'`` with RCBC raw returns.
    """
    refs = references(dataset)
    logger.info('Start evaluating capabilities (seed %d).', seed)
    reports = rollout_scores(model, stats, config, dataset, seed)
    values = _score_metrics(reports)
    values.update(heldout_capability_losses(model, stats, dataset.eval_split(), config, seed))
    values.update({'random_ref': refs['random'], 'expert_ref': refs['expert'],
                   'behavior_return': behavior_return(dataset.train_split()),
                   'rcbc_target': target_return(config, dataset)})
    sweep, rho = rcbc_target_sweep(model, stats, config.env, refs, config.eval.sweep_levels,
                                   config.eval.n_episodes, seed)
    values['rcbc_spearman'] = rho
    if metrics is not None:
        for _, row in sweep.iterrows():
            metrics.log(0, 'sweep_return', row['mean_return'], {'target': round(row['target'], 6)})
    if with_baselines:
        values.update(baseline_scores(config, dataset, stats, seed, metrics))
    if metrics is not None:
        metrics.log_many(config.train.total_steps, values, {'suite': 'capabilities'})
    logger.info('End evaluating capabilities (seed %d).', seed)
    return EvalReport(capability='CAPABILITIES', seed=seed, metrics=values,
                      raw_returns=reports['RCBC'].raw_returns)


def baseline_scores(config: ExperimentConfig, dataset: TrajectoryDataset, stats: NormStats, seed: int,
                    metrics: Optional[MetricsWriter] = None,
                    train_set: Optional[Sequence[Trajectory]] = None) -> Dict[str, float]:
    """Specialized baselines scored with the same metric definitions as the model."""
    train_n = normalize(train_set if train_set is not None else dataset.train_split(), stats)
    eval_n = normalize(dataset.eval_split(), stats)
    env, length = config.env, config.model.segment_length
    values = {}
    for task in ('BC', 'RCBC', 'FD', 'ID'):
        if task in ('FD', 'ID') and length < 2:
            continue
        result = baseline_mlp(task, train_n, eval_n, length, env.state_dim, env.action_dim, config.baseline,
                              seed, metrics, config.model.dtype)
        if task in ('BC', 'RCBC'):
            report = rollout_scores(result.model, stats, config, dataset, seed, (task,))[task]
            values['baseline_{0}_return'.format(task)] = report.metrics['mean_return']
            values['baseline_{0}_score'.format(task)] = report.metrics['normalized_score']
        elif result.heldout_loss is not None:
            values['baseline_{0}_loss'.format(task)] = result.heldout_loss
    return values


def ablate_masks(config: ExperimentConfig, seed: int, metrics: MetricsWriter,
                 dataset: Optional[TrajectoryDataset] = None) -> pd.DataFrame:
    """One model per training mask, all scored on RCBC and the held-out FD/ID losses."""
    dataset = dataset or build_dataset(config, seed)
    rows = []
    for kind in config.eval.ablation_masks:
        logger.info('Start mask ablation: %s', kind)
        variant = config.with_mask(kind)
        writer = metrics.child(mask=kind)
        result, stats = train_model(variant, dataset.train_split(), dataset.eval_split(), seed, writer)
        values = _score_metrics(rollout_scores(result.model, stats, variant, dataset, seed, ('RCBC',)))
        values.update(heldout_capability_losses(result.model, stats, dataset.eval_split(), variant, seed))
        writer.log_many(variant.train.total_steps, values)
        rows.append(dict(values, mask=kind, seed=seed))
    return pd.DataFrame(rows)


def hetero(config: ExperimentConfig, seed: int, metrics: MetricsWriter) -> pd.DataFrame:
    """
    Heteromodal study on expert data: a model trained on a few actioned plus many state-only
    trajectories against one trained on the actioned ones alone, with BC baselines for reference.
    """
    dataset = build_dataset(config, seed, mixture=[('expert', 1.0)])
    split = make_heteromodal(dataset.train_split(), config.eval.actioned_fraction,
                             config.eval.stateonly_fraction, seed)
    eval_set = dataset.eval_split()
    logger.info('heteromodal split: %d actioned, %d state-only', len(split.actioned), len(split.state_only))
    rows = []

    result, stats = train_model(config, split.train, eval_set, seed, metrics.child(variant='heteromodal'))
    reports = rollout_scores(result.model, stats, config, dataset, seed, ('RCBC', 'TWO_STAGE'))
    rows.append({'variant': 'heteromodal_direct', **_row(reports['RCBC'])})
    rows.append({'variant': 'heteromodal_two_stage', **_row(reports['TWO_STAGE'])})

    result, actioned_stats = train_model(config, split.actioned, eval_set, seed, metrics.child(variant='actioned'))
    rows.append({'variant': 'actioned_only', **_row(rollout_scores(result.model, actioned_stats, config,
                                                                   dataset, seed, ('RCBC',))['RCBC'])})

    full_stats = fit_norm_stats(dataset.train_split(), config.env.action_dim)
    for name, train_set, bc_stats in (('oracle_bc', dataset.train_split(), full_stats),
                                      ('actioned_bc', split.actioned, actioned_stats)):
        bc = baseline_mlp('BC', normalize(train_set, bc_stats), normalize(eval_set, bc_stats),
                          config.model.segment_length, config.env.state_dim, config.env.action_dim,
                          config.baseline, seed, metrics.child(variant=name), config.model.dtype)
        rows.append({'variant': name, **_row(rollout_scores(bc.model, bc_stats, config, dataset, seed,
                                                            ('BC',))['BC'])})
    for row in rows:
        metrics.log_many(config.train.total_steps, {'mean_return': row['mean_return'],
                                                    'normalized_score': row['normalized_score']},
                         {'variant': row['variant']})
        row['seed'] = seed
    return pd.DataFrame(rows)


def _row(report: EvalReport) -> Dict[str, float]:
    return {'mean_return': report.metrics['mean_return'], 'normalized_score': report.metrics['normalized_score']}


def sweep_data(config: ExperimentConfig, seed: int, metrics: MetricsWriter) -> pd.DataFrame:
    """
    RCBC score against the share of trajectories carrying actions, for the model trained on
    that share, the specialized RCBC baseline, and the model that also sees the remaining
    trajectories state-only.
    """
    dataset = build_dataset(config, seed)
    full = dataset.train_split()
    rows = []
    for fraction in config.eval.data_fractions:
        logger.info('Start data fraction %.3g', fraction)
        chosen = subset(full, fraction, seed)
        tags = {'fraction': fraction}
        result, stats = train_model(config, chosen, dataset.eval_split(), seed, metrics.child(model='mtm', **tags))
        mtm = rollout_scores(result.model, stats, config, dataset, seed, ('RCBC',))['RCBC']
        rows.append({'model': 'mtm', 'fraction': fraction, **_row(mtm)})

        baseline = baseline_mlp('RCBC', normalize(chosen, stats), normalize(dataset.eval_split(), stats),
                                config.model.segment_length, config.env.state_dim, config.env.action_dim,
                                config.baseline, seed, metrics.child(model='baseline', **tags), config.model.dtype)
        base = rollout_scores(baseline.model, stats, config, dataset, seed, ('RCBC',))['RCBC']
        rows.append({'model': 'baseline', 'fraction': fraction, **_row(base)})

        if fraction < 1.0:
            kept = {id(t) for t in chosen}
            mixed = chosen + [t.without('action') for t in full if id(t) not in kept]
            result, mixed_stats = train_model(config, mixed, dataset.eval_split(), seed,
                                              metrics.child(model='heteromodal', **tags))
            het = rollout_scores(result.model, mixed_stats, config, dataset, seed, ('RCBC',))['RCBC']
            rows.append({'model': 'heteromodal', 'fraction': fraction, **_row(het)})
    for row in rows:
        metrics.log_many(config.train.total_steps, {'normalized_score': row['normalized_score']},
                         {'model': row['model'], 'fraction': row['fraction']})
        row['seed'] = seed
    return pd.DataFrame(rows)


def sweep_seglen(config: ExperimentConfig, seed: int, metrics: MetricsWriter) -> pd.DataFrame:
    """The capability metrics of models trained with each configured segment length."""
    dataset = build_dataset(config, seed)
    rows = []
    for length in config.eval.segment_lengths:
        logger.info('Start segment length %d', length)
        variant = config.with_segment_length(length)
        writer = metrics.child(segment_length=length)
        result, stats = train_model(variant, dataset.train_split(), dataset.eval_split(), seed, writer)
        values = _score_metrics(rollout_scores(result.model, stats, variant, dataset, seed))
        values.update(heldout_capability_losses(result.model, stats, dataset.eval_split(), variant, seed))
        writer.log_many(variant.train.total_steps, values)
        rows.append(dict(values, segment_length=length, seed=seed))
    return pd.DataFrame(rows)


def td3_suite(config: ExperimentConfig, seed: int, metrics: MetricsWriter) -> pd.DataFrame:
    """
    Pretrains on reward-free exploration data, relabels rewards for the configured task and
    runs offline TD3 once per representation variant.
    """
    env = config.env
    exploration = build_dataset(config, seed, mixture=[('random', 1.0)],
                                n_trajectories=config.eval.exploration_trajectories)
    reward_free = [t.without('rtg') for t in exploration.train_split()]
    pretrained: Optional[MtmModel] = None
    stats: Optional[NormStats] = None
    if any(name != 'raw' for name in config.eval.td3_variants):
        logger.info('Start pretraining on %d reward-free trajectories', len(reward_free))
        result, stats = train_model(config, reward_free, [t.without('rtg') for t in exploration.eval_split()],
                                    seed, metrics.child(phase='pretrain'))
        pretrained = result.model
    transitions = relabel_rewards(exploration.train_split(), env)
    if stats is None:
        stats = fit_norm_stats(transitions, env.action_dim)
    refs = reference_returns(env, config.dataset.reference_episodes, seed)
    rows = []
    for name in config.eval.td3_variants:
        representation, finetune = TD3_VARIANTS[name]
        td3_config = replace(config.td3, representation=representation, finetune=finetune, seed=seed)
        model = pretrained.clone() if representation != 'raw' else None
        logger.info('Start TD3 variant %s', name)
        outcome = td3_train_offline(transitions, env, td3_config, model, stats, refs, metrics.child(variant=name))
        for point in outcome.curve:
            rows.append(dict(point, variant=name, seed=seed))
    return pd.DataFrame(rows)


def td3_summary(curves: pd.DataFrame, threshold: float = 0.9) -> pd.DataFrame:
    """
    Final return per variant and the first update at which it reaches ``threshold`` times the
    raw variant's final return.
    """
    rows: List[Dict] = []
    finals = curves.sort_values('update').groupby('variant')['mean_return'].last()
    raw_final = finals.get('raw')
    for name, group in curves.sort_values('update').groupby('variant'):
        row = {'variant': name, 'final_return': float(finals[name]), 'updates': int(group['update'].max())}
        if raw_final is not None:
            goal = raw_final * threshold if raw_final >= 0 else raw_final / threshold
            reached = group[group['mean_return'] >= goal]
            row['updates_to_threshold'] = int(reached['update'].iloc[0]) if len(reached) else np.nan
        rows.append(row)
    return pd.DataFrame(rows)
