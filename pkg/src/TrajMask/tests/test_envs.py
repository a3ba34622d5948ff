import unittest

import numpy as np

from ..envs import (EnvConfig, ScriptedPolicySpec, env_step, generate_dataset, inverse_dynamics_oracle,
                    normalized_score, reference_returns, relabel_rewards)
from ..exceptions import ConfigError, DatasetError, DegenerateReferenceError, NonFiniteError, UnknownKindError


class TestEnvConfig(unittest.TestCase):

    def test_point_mass_defaults(self):
        """Test the point-mass dimensions and horizon."""
        config = EnvConfig()
        self.assertEqual((config.state_dim, config.action_dim, config.horizon), (4, 2, 64))
        self.assertEqual(config.task, 'reach')

    def test_linear_system_is_seeded_and_stable(self):
        """Test that the random system depends only on the env seed and is stable."""
        a = EnvConfig(kind='linear_system', seed=3)
        b = EnvConfig(kind='linear_system', seed=3)
        np.testing.assert_array_equal(a.A_matrix, b.A_matrix)
        self.assertLessEqual(np.max(np.abs(np.linalg.eigvals(a.A_matrix))), 0.95 + 1e-9)

    def test_rejects_bad_settings(self):
        """Test unknown kinds, tasks and fixed point-mass dimensions."""
        with self.assertRaises(ConfigError):
            EnvConfig(kind='cartpole')
        with self.assertRaises(ConfigError):
            EnvConfig(task='regulate')
        with self.assertRaises(ConfigError):
            EnvConfig(state_dim=5)

    def test_policy_spec(self):
        """Test mixture validation."""
        with self.assertRaises(DatasetError):
            ScriptedPolicySpec(mixture=[('expert', 0.5), ('random', 0.3)])
        with self.assertRaises(UnknownKindError):
            ScriptedPolicySpec(quality='superhuman')


class TestDynamics(unittest.TestCase):

    def test_point_mass_step(self):
        """Test Euler integration and action clipping."""
        config = EnvConfig(dt=0.1)
        state = np.array([0.0, 0.0, 1.0, 0.0])
        next_state, _ = env_step(state, np.array([5.0, 0.0]), config)
        np.testing.assert_allclose(next_state, [0.1, 0.0, 1.1, 0.0])

    def test_process_noise_needs_generator(self):
        """Test that a noisy step without a generator raises ConfigError."""
        config = EnvConfig(noise_std=0.05)
        state = np.array([0.0, 0.0, 1.0, 0.0])
        with self.assertRaises(ConfigError):
            env_step(state, np.zeros(2), config)
        clean, _ = env_step(state, np.zeros(2), EnvConfig())
        noisy, _ = env_step(state, np.zeros(2), config, np.random.default_rng(0))
        self.assertFalse(np.allclose(noisy, clean))

    def test_non_finite_state(self):
        """Test that a NaN state is refused."""
        with self.assertRaises(NonFiniteError):
            env_step(np.array([np.nan, 0.0, 0.0, 0.0]), np.zeros(2), EnvConfig())

    def test_inverse_dynamics_oracle_recovers_actions(self):
        """Test exact action recovery on the noise-free linear system."""
        config = EnvConfig(kind='linear_system', noise_std=0.0, seed=1)
        rng = np.random.default_rng(0)
        for _ in range(10):
            state = rng.normal(size=6)
            action = rng.uniform(-1.0, 1.0, size=2)
            next_state, _ = env_step(state, action, config)
            np.testing.assert_allclose(inverse_dynamics_oracle(state, next_state, config), action, atol=1e-8)


class TestDatasets(unittest.TestCase):

    def setUp(self):
        self.config = EnvConfig(horizon=16)

    def test_generation_is_deterministic(self):
        """Test that one seed always yields the same trajectories."""
        policy = ScriptedPolicySpec(mixture=[('expert', 0.5), ('random', 0.5)])
        a = generate_dataset(self.config, policy, 6, seed=2)
        b = generate_dataset(self.config, policy, 6, seed=2)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.states, y.states)
            self.assertEqual(x.tier, y.tier)
        self.assertEqual(sorted(t.tier for t in a), ['expert'] * 3 + ['random'] * 3)

    def test_trajectories_are_float32_and_complete(self):
        """Test dtype, shapes and the stored return-to-go."""
        traj = generate_dataset(self.config, ScriptedPolicySpec(), 1, seed=0)[0]
        self.assertEqual(traj.states.dtype, np.float32)
        self.assertEqual(traj.states.shape, (16, 4))
        self.assertEqual(traj.actions.shape, (16, 2))
        self.assertTrue(traj.presence.all())
        self.assertAlmostEqual(float(traj.rtg[0]), float(traj.rewards.sum()), places=3)

    def test_expert_beats_random(self):
        """Test that the reference returns are ordered."""
        refs = reference_returns(EnvConfig(), n_episodes=20, seed=0)
        self.assertGreater(refs['expert'], refs['random'])

    def test_relabel_for_another_task(self):
        """Test relabeling rewards for a new task and the same task."""
        trajs = generate_dataset(self.config, ScriptedPolicySpec(), 2, seed=1)
        same = relabel_rewards(trajs, self.config)
        np.testing.assert_allclose(same[0].rewards, trajs[0].rewards, atol=1e-4)
        dash = relabel_rewards(trajs, self.config.with_task('dash'))
        np.testing.assert_allclose(dash[0].rewards[:-1], trajs[0].states[1:, 2], atol=1e-4)
        with self.assertRaises(DatasetError):
            relabel_rewards([trajs[0].without('action')], self.config)


class TestNormalizedScore(unittest.TestCase):

    def test_anchors(self):
        """Test that the references map to 0 and 100."""
        self.assertAlmostEqual(normalized_score(-10.0, -10.0, -2.0), 0.0)
        self.assertAlmostEqual(normalized_score(-2.0, -10.0, -2.0), 100.0)
        self.assertAlmostEqual(normalized_score(-6.0, -10.0, -2.0), 50.0)

    def test_degenerate_references(self):
        """Test that equal references are refused."""
        with self.assertRaises(DegenerateReferenceError):
            normalized_score(1.0, 3.0, 3.0)


if __name__ == '__main__':
    unittest.main()
