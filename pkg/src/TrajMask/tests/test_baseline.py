import unittest

import numpy as np

from ..baseline import BaselineConfig, BaselineMlp, baseline_mlp
from ..envs import EnvConfig, ScriptedPolicySpec, generate_dataset
from ..exceptions import ConfigError, DatasetError, UnknownKindError
from .test_model import make_batch


class TestBaselineMlp(unittest.TestCase):

    def setUp(self):
        self.config = BaselineConfig(width=16, total_steps=10, warmup_steps=1, batch_size=8)

    def test_input_sizes_follow_the_capability_layout(self):
        """Test that each network reads exactly the visible cells of its mask."""
        sizes = {task: BaselineMlp(task, 4, 3, 2, self.config).input_dim for task in ('BC', 'RCBC', 'ID', 'FD')}
        self.assertEqual(sizes, {'BC': 18, 'RCBC': 22, 'ID': 12, 'FD': 15})

    def test_reconstruct_fills_only_the_target(self):
        """Test the reconstruction grid of a baseline."""
        model = BaselineMlp('FD', 4, 3, 2, self.config)
        out = model.reconstruct(make_batch(np.random.default_rng(0)))
        self.assertEqual(out['state'].shape, (3, 4, 3))
        self.assertTrue(np.all(out['state'][:, :3] == 0.0))
        self.assertTrue(np.all(out['action'] == 0.0))

    def test_errors(self):
        """Test unknown tasks and bad configs."""
        with self.assertRaises(UnknownKindError):
            BaselineMlp('FULL', 4, 3, 2, self.config)
        with self.assertRaises(ConfigError):
            BaselineConfig(total_steps=10, warmup_steps=10)


class TestBaselineTraining(unittest.TestCase):

    def setUp(self):
        env = EnvConfig(kind='linear_system', horizon=16, noise_std=0.0, seed=0)
        self.trajs = generate_dataset(env, ScriptedPolicySpec(quality='medium'), 12, seed=0)
        self.config = BaselineConfig(width=32, total_steps=300, warmup_steps=20, batch_size=32,
                                     learning_rate=1e-3, weight_decay=0.0)

    def test_forward_dynamics_baseline_learns(self):
        """Test that the FD baseline reduces its loss and reports a held-out loss."""
        result = baseline_mlp('FD', self.trajs[:10], self.trajs[10:], 4, 6, 2, self.config, seed=0)
        self.assertEqual(len(result.losses), 300)
        self.assertLess(np.mean(result.losses[-20:]), np.mean(result.losses[:20]))
        self.assertIsNotNone(result.heldout_loss)

    def test_needs_actions(self):
        """Test that a state-only training set cannot train the ID baseline."""
        state_only = [t.without('action') for t in self.trajs]
        with self.assertRaises(DatasetError):
            baseline_mlp('ID', state_only, [], 4, 6, 2, self.config)


if __name__ == '__main__':
    unittest.main()
