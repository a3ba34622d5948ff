import os
import shutil
import unittest
from dataclasses import replace
from unittest import mock

import numpy as np

from .. import diffcore as dc
from .. import training
from ..constants import ACTION, RTG
from ..diffcore import Tensor
from ..exceptions import ConfigError, DatasetFormatError, NonFiniteError, NotFoundException
from ..masking import capability_mask
from ..model import MtmModel
from ..trajdata import NormStats, Trajectory, compute_rtg
from ..training import (AdamW, TrainConfig, clip_grad_norm, decays, load_checkpoint, lr_at_step, masked_mse_loss,
                        sample_batch, save_checkpoint, train)
from .test_model import make_batch, small_config


def make_trajectories(n=12, length=8, seed=0):
    rng = np.random.default_rng(seed)
    trajs = []
    for _ in range(n):
        rewards = rng.normal(size=length).astype(np.float32)
        trajs.append(Trajectory(states=rng.normal(size=(length, 3)).astype(np.float32),
                                actions=rng.normal(size=(length, 2)).astype(np.float32),
                                rewards=rewards, rtg=compute_rtg(rewards)))
    return trajs


class TestMaskedLoss(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_absent_cells_get_zero_gradient(self):
        """Test that absent modalities add nothing to the loss value or its gradient."""
        for _ in range(100):
            batch = make_batch(self.rng, batch_size=4, dtype=np.float64)
            batch.presence[:, ACTION] = self.rng.random(4) < 0.5
            batch.presence[:, RTG] = self.rng.random(4) < 0.5
            preds = [Tensor(self.rng.normal(size=batch.modality(m).shape), requires_grad=True) for m in range(3)]
            with dc.Tape() as tape:
                loss = masked_mse_loss(preds, batch)
            dc.backward(tape, loss)
            total, count = 0.0, 0
            for m, pred in enumerate(preds):
                rows = batch.presence[:, m]
                grad = pred.grad if pred.grad is not None else np.zeros_like(pred.data)
                self.assertTrue(np.all(grad[~rows] == 0.0))
                diff = pred.data[rows] - batch.modality(m)[rows]
                total += float(np.sum(diff * diff))
                count += diff.size
            self.assertAlmostEqual(loss.item(), total / count, places=10)

    def test_state_only_batch_leaves_action_head_untouched(self):
        """Test that a batch without actions gives the action head exactly zero gradient."""
        model = MtmModel(small_config(precision='float64'), seed=0)
        batch = make_batch(self.rng, batch_size=4, dtype=np.float64)
        batch.presence[:, ACTION] = False
        batch.actions[...] = 0.0
        params = model.named_parameters()
        with dc.Tape() as tape:
            loss = masked_mse_loss(model(batch, capability_mask('FD', 4)), batch)
        dc.backward(tape, loss)
        for name, p in params.items():
            if name.startswith('heads.action.'):
                self.assertTrue(p.grad is None or np.all(p.grad == 0.0), name)


class TestOptimization(unittest.TestCase):

    def test_schedule(self):
        """Test linear warmup and cosine decay to zero."""
        config = TrainConfig(total_steps=100, warmup_steps=10, learning_rate=1.0)
        self.assertEqual(lr_at_step(0, config), 0.0)
        self.assertAlmostEqual(lr_at_step(5, config), 0.5)
        self.assertAlmostEqual(lr_at_step(10, config), 1.0)
        self.assertAlmostEqual(lr_at_step(55, config), 0.5)
        self.assertAlmostEqual(lr_at_step(100, config), 0.0)

    def test_config_validation(self):
        """Test rejected training settings."""
        with self.assertRaises(ConfigError):
            TrainConfig(total_steps=10, warmup_steps=10)
        with self.assertRaises(ConfigError):
            TrainConfig(mask_kind='checkerboard')
        with self.assertRaises(ConfigError):
            TrainConfig(mask_ratio_range=[0.8, 0.2])

    def test_decay_filter(self):
        """Test that only projection weights decay."""
        self.assertTrue(decays('encoder.0.attn.query.weight'))
        self.assertFalse(decays('encoder.0.attn.query.bias'))
        self.assertFalse(decays('mask_token'))
        self.assertFalse(decays('encoder_norm.gamma'))

    def test_adamw_first_step(self):
        """Test that the first bias-corrected step moves each entry by about lr against the gradient."""
        w = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        b = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        params = {'layer.weight': w, 'layer.bias': b}
        w.grad = np.array([0.5, -2.0])
        b.grad = np.array([0.5, -2.0])
        AdamW(params, lr=0.1, weight_decay=0.5).step()
        np.testing.assert_allclose(b.data, [0.9, -0.9], atol=1e-6)
        np.testing.assert_allclose(w.data, [1.0 - 0.1 - 0.05, -1.0 + 0.1 + 0.05], atol=1e-6)

    def test_clip_grad_norm(self):
        """Test global-norm clipping."""
        a = Tensor(np.zeros(2), requires_grad=True)
        a.grad = np.array([3.0, 4.0])
        self.assertAlmostEqual(clip_grad_norm([a], 1.0), 5.0)
        self.assertAlmostEqual(float(np.linalg.norm(a.grad)), 1.0, places=5)

    def test_sample_batch_shapes(self):
        """Test the batch layout drawn from trajectories."""
        batch = sample_batch(make_trajectories(), 5, 4, np.random.default_rng(0), action_dim=2)
        self.assertEqual(batch.states.shape, (5, 4, 3))
        self.assertEqual(batch.rtg.shape, (5, 4, 1))


class TestTrainingLoop(unittest.TestCase):

    def setUp(self):
        """Create trajectories, a config and a Result directory."""
        self.trajs = make_trajectories()
        self.config = TrainConfig(batch_size=8, total_steps=20, warmup_steps=2, eval_interval=10,
                                  eval_batch_size=16, checkpoint_interval=10, segment_length=4, seed=5)
        self.stats = NormStats(mean={'rtg': [0.0], 'state': [0.0] * 3, 'action': [0.0] * 2},
                               std={'rtg': [1.0], 'state': [1.0] * 3, 'action': [1.0] * 2})
        self.output_dir = os.path.join(os.getcwd(), 'Result')
        os.makedirs(self.output_dir, exist_ok=True)

    def test_train_logs_history_and_checkpoints(self):
        """Test the history rows and the checkpoint files of a short run."""
        result = train(self.trajs[:10], self.trajs[10:], MtmModel(small_config(), seed=0), self.config,
                       self.stats, checkpoint_dir=self.output_dir)
        self.assertEqual(len(result.losses), 20)
        self.assertEqual([row['step'] for row in result.history], [10, 20])
        self.assertIn('eval_FD', result.history[-1])
        self.assertTrue(os.path.exists(os.path.join(self.output_dir, 'step_000010.mtmc')))
        self.assertEqual(result.checkpoint, os.path.join(self.output_dir, 'final.mtmc'))

    def test_checkpoint_round_trip(self):
        """Test that parameters, moments and statistics survive a save and load."""
        model = MtmModel(small_config(), seed=1)
        result = train(self.trajs[:10], self.trajs[10:], model, self.config, self.stats,
                       checkpoint_dir=self.output_dir)
        checkpoint = load_checkpoint(result.checkpoint)
        self.assertEqual(checkpoint.step, 20)
        self.assertEqual(checkpoint.stats().mean, self.stats.mean)
        restored = checkpoint.build_model()
        for name, array in model.state_dict().items():
            np.testing.assert_array_equal(restored.state_dict()[name], array)
        self.assertIn('mask_token', checkpoint.moments['m'])

    def test_resume_reproduces_losses(self):
        """Test that resuming from step 10 reproduces the remaining losses."""
        first = train(self.trajs[:10], self.trajs[10:], MtmModel(small_config(), seed=0), self.config,
                      self.stats, checkpoint_dir=self.output_dir)
        checkpoint = load_checkpoint(os.path.join(self.output_dir, 'step_000010.mtmc'))
        resumed = train(self.trajs[:10], self.trajs[10:], checkpoint.build_model(), self.config, self.stats,
                        resume=checkpoint)
        self.assertEqual(len(resumed.losses), 10)
        np.testing.assert_allclose(resumed.losses, first.losses[10:], atol=1e-6)

    def test_non_finite_loss_stops_training(self):
        """Test that a NaN loss raises and leaves a last-good checkpoint."""
        bad = make_trajectories()
        for traj in bad:
            traj.states[:, 0] = np.nan
        with self.assertRaises(NonFiniteError):
            train(bad, [], MtmModel(small_config(), seed=0), self.config, checkpoint_dir=self.output_dir)
        self.assertTrue(os.path.exists(os.path.join(self.output_dir, 'last_good.mtmc')))

    def test_last_good_is_state_before_the_failing_update(self):
        """Test that a NaN at step 3 rolls back to the state saved after step 1."""
        calls = []

        def fails_on_third_call(preds, batch):
            loss = masked_mse_loss(preds, batch)
            calls.append(loss.item())
            return dc.scale(loss, np.nan) if len(calls) == 3 else loss
        model = MtmModel(small_config(), seed=0)
        config = replace(self.config, checkpoint_interval=1)
        with mock.patch.object(training, 'masked_mse_loss', side_effect=fails_on_third_call):
            with self.assertRaises(NonFiniteError):
                train(self.trajs, [], model, config, self.stats, checkpoint_dir=self.output_dir)
        good = load_checkpoint(os.path.join(self.output_dir, 'last_good.mtmc'))
        after_first = load_checkpoint(os.path.join(self.output_dir, 'step_000001.mtmc'))
        self.assertEqual((good.step, good.optimizer_step), (1, 1))
        self.assertEqual(good.rng, after_first.rng)
        for name, array in after_first.params.items():
            np.testing.assert_array_equal(good.params[name], array)
            np.testing.assert_array_equal(model.state_dict()[name], array)
        for group in ('m', 'v'):
            for name, array in after_first.moments[group].items():
                np.testing.assert_array_equal(good.moments[group][name], array)

    def test_segment_length_mismatch(self):
        """Test that the training and model segment lengths must agree."""
        config = TrainConfig(total_steps=2, warmup_steps=0, segment_length=2)
        with self.assertRaises(ConfigError):
            train(self.trajs, [], MtmModel(small_config(), seed=0), config)

    def test_load_errors(self):
        """Test missing and foreign checkpoint files."""
        with self.assertRaises(NotFoundException):
            load_checkpoint(os.path.join(self.output_dir, 'missing.mtmc'))
        path = os.path.join(self.output_dir, 'foreign.mtmc')
        with open(path, 'wb') as f:
            f.write(b'NOPE' + bytes(8))
        with self.assertRaises(DatasetFormatError):
            load_checkpoint(path)

    def test_save_without_optimizer(self):
        """Test a parameters-only checkpoint."""
        path = save_checkpoint(os.path.join(self.output_dir, 'bare.mtmc'), MtmModel(small_config(), seed=0),
                               None, self.config, 0)
        checkpoint = load_checkpoint(path)
        self.assertEqual(checkpoint.optimizer_step, 0)
        self.assertIsNone(checkpoint.stats())

    def tearDown(self):
        """Clean up test files after each test."""
        if os.path.exists(self.output_dir):
            shutil.rmtree(self.output_dir)


if __name__ == '__main__':
    unittest.main()
