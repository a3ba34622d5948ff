import unittest

import numpy as np

from ..envs import EnvConfig, ScriptedPolicySpec, generate_dataset
from ..exceptions import ConfigError, DatasetError
from ..model import MtmModel
from ..reprrl import (Td3Agent, Td3Config, TransitionBatch, encode_state, encode_state_action, make_transitions,
                      td3_train_offline, td3_update)
from .test_model import small_config


def adam_first_step(p, g, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = (1.0 - b1) * g
    v = (1.0 - b2) * g * g
    return p - lr * (m / (1.0 - b1)) / (np.sqrt(v / (1.0 - b2)) + eps)


class TestTd3Update(unittest.TestCase):
    """One update of linear actor and critics computed by hand."""

    def setUp(self):
        self.config = Td3Config(actor_layers=0, critic_layers=0, discount=0.9, polyak=0.5, policy_delay=1,
                                target_noise=0.0, actor_lr=0.01, critic_lr=0.02)
        self.bound = 2.0
        self.agent = Td3Agent(1, 1, self.bound, self.config, seed=3)
        rng = np.random.default_rng(0)
        self.batch = TransitionBatch(states=rng.normal(size=(4, 1)), actions=rng.uniform(-2, 2, size=(4, 1)),
                                     rewards=rng.normal(size=(4, 1)), next_states=rng.normal(size=(4, 1)),
                                     not_done=np.ones((4, 1)))

    def test_matches_hand_computation(self):
        """Test critic, actor and target parameters after one update."""
        get = lambda module: {k: v.data.copy() for k, v in module.named_parameters().items()}
        actor, c1, c2 = get(self.agent.actor), get(self.agent.critic1), get(self.agent.critic2)
        s, a, r, s2 = self.batch.states, self.batch.actions, self.batch.rewards, self.batch.next_states
        n = s.shape[0]
        gamma, tau = self.config.discount, self.config.polyak

        a2 = np.clip(self.bound * np.tanh(s2 @ actor['out.weight'] + actor['out.bias']), -self.bound, self.bound)
        x2 = np.concatenate([s2, a2], axis=1)
        q_next = np.minimum(x2 @ c1['out.weight'] + c1['out.bias'], x2 @ c2['out.weight'] + c2['out.bias'])
        y = r + gamma * q_next
        x = np.concatenate([s, a], axis=1)
        new_critics = []
        for c in (c1, c2):
            g = 2.0 / n * (x @ c['out.weight'] + c['out.bias'] - y)
            new_critics.append({'out.weight': adam_first_step(c['out.weight'], x.T @ g, 0.02),
                                'out.bias': adam_first_step(c['out.bias'], g.sum(axis=0), 0.02)})
        z = s @ actor['out.weight'] + actor['out.bias']
        gz = -1.0 / n * new_critics[0]['out.weight'][1, 0] * self.bound * (1.0 - np.tanh(z) ** 2)
        new_actor = {'out.weight': adam_first_step(actor['out.weight'], s.T @ gz, 0.01),
                     'out.bias': adam_first_step(actor['out.bias'], gz.sum(axis=0), 0.01)}

        diagnostics = td3_update(self.agent, self.batch, self.config, np.random.default_rng(1))
        self.assertIn('actor_loss', diagnostics)
        for module, target, expected, old in ((self.agent.critic1, self.agent.critic1_target, new_critics[0], c1),
                                              (self.agent.critic2, self.agent.critic2_target, new_critics[1], c2),
                                              (self.agent.actor, self.agent.actor_target, new_actor, actor)):
            params, targets = module.named_parameters(), target.named_parameters()
            for name, value in expected.items():
                np.testing.assert_allclose(params[name].data, value, rtol=0, atol=1e-10)
                np.testing.assert_allclose(targets[name].data, tau * value + (1 - tau) * old[name],
                                           rtol=0, atol=1e-10)

    def test_policy_delay_skips_actor(self):
        """Test that the actor waits for the policy delay."""
        config = Td3Config(actor_layers=0, critic_layers=0, policy_delay=2)
        agent = Td3Agent(1, 1, 1.0, config, seed=0)
        before = agent.actor.named_parameters()['out.weight'].data.copy()
        self.assertNotIn('actor_loss', td3_update(agent, self.batch, config, np.random.default_rng(0)))
        np.testing.assert_array_equal(agent.actor.named_parameters()['out.weight'].data, before)
        self.assertIn('actor_loss', td3_update(agent, self.batch, config, np.random.default_rng(0)))


class TestRepresentations(unittest.TestCase):

    def setUp(self):
        self.model = MtmModel(small_config(state_dim=4, action_dim=2, precision='float64', dropout=0.0), seed=0)
        self.env = EnvConfig(horizon=8)
        self.trajs = generate_dataset(self.env, ScriptedPolicySpec(quality='random'), 4, seed=0)

    def test_encoder_shapes(self):
        """Test the state and state-action feature sizes."""
        states = np.zeros((5, 4))
        self.assertEqual(encode_state(self.model, states).shape, (5, 16))
        self.assertEqual(encode_state_action(self.model, states, np.zeros((5, 2))).shape, (5, 32))

    def test_frozen_encoder_is_not_updated(self):
        """Test that frozen representations leave the pretrained weights untouched."""
        for representation in ('mtm_state', 'mtm_state_action'):
            model = self.model.clone()
            before = {k: v.copy() for k, v in model.state_dict().items()}
            config = Td3Config(representation=representation, finetune=False, actor_width=8, critic_width=8,
                               batch_size=8, total_updates=4, eval_interval=4, eval_episodes=1, policy_delay=1)
            td3_train_offline(self.trajs, self.env, config, model)
            for name, array in model.state_dict().items():
                np.testing.assert_array_equal(array, before[name])

    def test_finetuned_encoder_is_updated(self):
        """Test that finetuning moves the encoder."""
        model = self.model.clone()
        before = model.state_dict()['encoder_norm.gamma'].copy()
        config = Td3Config(representation='mtm_state', finetune=True, actor_width=8, critic_width=8,
                           batch_size=8, total_updates=2, eval_interval=2, eval_episodes=1)
        td3_train_offline(self.trajs, self.env, config, model)
        self.assertFalse(np.array_equal(model.state_dict()['encoder_norm.gamma'], before))

    def test_errors(self):
        """Test a representation without a model and trajectories without actions."""
        with self.assertRaises(ConfigError):
            Td3Agent(4, 2, 1.0, Td3Config(representation='mtm_state'))
        with self.assertRaises(ConfigError):
            Td3Config(representation='pixels')
        with self.assertRaises(DatasetError):
            make_transitions([self.trajs[0].without('action')])


class TestOfflineTraining(unittest.TestCase):

    def test_curve_points(self):
        """Test the learning curve of a short raw-state run."""
        env = EnvConfig(horizon=8)
        trajs = generate_dataset(env, ScriptedPolicySpec(quality='medium'), 4, seed=1)
        config = Td3Config(actor_width=8, critic_width=8, batch_size=16, total_updates=6, eval_interval=3,
                           eval_episodes=2)
        result = td3_train_offline(trajs, env, config, references={'random': -30.0, 'expert': -5.0})
        self.assertEqual([p['update'] for p in result.curve], [3, 6])
        self.assertIn('normalized_score', result.curve[-1])
        self.assertEqual(len(make_transitions(trajs)), 4 * 7)


if __name__ == '__main__':
    unittest.main()
