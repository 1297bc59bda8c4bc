import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase, tag

from lavagrid.services import ACTION_FORWARD, LavaConfig, LavaGridEnvironment, LavaInstance, build_layout, clustering_for
from pomdp.services import ENV_TAG_LAVAGRID, SAFE, UNSAFE, StateKey, Transition
from shields.services import ShieldKey, TabularShield
from .exceptions import CheckpointFormatError, NumericalError
from .services import (
    AdamOptimizer, MistakeEntry, MistakeLedger, PARAM_NAMES, PPOAgent, PPOConfig, PolicyNetwork, RolloutBuffer,
    compute_gae, load_checkpoint, masked_log_softmax, ppo_loss_and_grad, ppo_update,
    read_mistake_log, save_checkpoint, write_mistake_log,
)


def random_batch(network, rng, size=8, jitter=0.05, mask_some=True):
    features = rng.normal(size=(size, network.input_size))
    masks = np.ones((size, network.action_count), dtype=np.int8)
    if mask_some:
        masks[::3, 0] = 0
    logits, _, _ = network.forward(features)
    log_probs, allowed, _ = masked_log_softmax(logits, masks)
    actions = np.array([rng.choice(np.flatnonzero(row)) for row in allowed])
    chosen = log_probs[np.arange(size), actions]
    return {
        'features': features,
        'actions': actions,
        'old_log_probs': chosen + rng.normal(0.0, jitter, size=size),
        'masks': masks,
        'advantages': rng.normal(size=size),
        'returns': rng.normal(size=size),
    }


def numeric_gradient(network, batch, clip, value_coef, entropy_coef, h=1e-6):
    grads = {}
    for name in PARAM_NAMES:
        param = network.params[name]
        grad = np.zeros_like(param)
        for index in np.ndindex(param.shape):
            original = param[index]
            param[index] = original + h
            plus = ppo_loss_and_grad(network, batch, clip, value_coef, entropy_coef)[0]['loss']
            param[index] = original - h
            minus = ppo_loss_and_grad(network, batch, clip, value_coef, entropy_coef)[0]['loss']
            param[index] = original
            grad[index] = (plus - minus) / (2 * h)
        grads[name] = grad
    return grads


def flat(grads):
    return np.concatenate([grads[name].reshape(-1) for name in PARAM_NAMES])


def make_key(x, action=ACTION_FORWARD):
    return ShieldKey(StateKey.pack(ENV_TAG_LAVAGRID, 0, x, 0), action)


class GaeTestCase(SimpleTestCase):
    """
    Tests pour l'estimation d'avantage généralisée
    """

    def test_single_terminal_step(self):
        advantages, returns = compute_gae([1.0], [0.0], [True], [True], [0.0], gamma=0.9, lam=0.7)

        self.assertEqual(advantages.tolist(), [1.0])
        self.assertEqual(returns.tolist(), [1.0])

    def test_two_steps_without_discount(self):
        advantages, _ = compute_gae([0.0, 1.0], [0.0, 0.0], [False, True], [False, True], [0.0, 0.0], 1.0, 1.0)

        self.assertEqual(advantages.tolist(), [1.0, 1.0])

    def test_lambda_zero_gives_td_errors(self):
        rewards = [0.5, -1.0, 2.0]
        values = [0.1, 0.3, -0.2]
        advantages, _ = compute_gae(rewards, values, [False, False, True], [False, False, True], [0, 0, 0], 0.9, 0.0)

        expected = [0.5 + 0.9 * 0.3 - 0.1, -1.0 + 0.9 * -0.2 - 0.3, 2.0 + 0.2]
        np.testing.assert_allclose(advantages, expected)

    def test_truncated_tail_bootstraps(self):
        advantages, returns = compute_gae([0.0], [0.0], [False], [True], [5.0], 0.5, 0.95)

        self.assertEqual(advantages.tolist(), [2.5])

    def test_open_segment_is_refused(self):
        buffer = RolloutBuffer()
        buffer.add(np.zeros(2), 0, 0.0, 0.0, [1, 1], 1.0, False, False)

        with self.assertRaises(ValueError):
            buffer.compute_advantages(0.99, 0.95)


class PPOLossTestCase(SimpleTestCase):
    """
    Tests pour l'objectif tronqué et ses gradients
    """

    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.network = PolicyNetwork(input_size=3, action_count=3, hidden=2, rng=self.rng)

    def test_ratio_is_clipped(self):
        """Test : ratio 1.5, avantage positif, epsilon 0.2 -> contribution 1.2 A"""
        batch = random_batch(self.network, self.rng, size=1, mask_some=False)
        logits, _, _ = self.network.forward(batch['features'])
        log_probs, _, _ = masked_log_softmax(logits, batch['masks'])
        batch['old_log_probs'] = log_probs[0, batch['actions']] - np.log(1.5)
        batch['advantages'] = np.array([2.0])

        stats, grads = ppo_loss_and_grad(self.network, batch, clip=0.2, value_coef=0.0, entropy_coef=0.0)

        self.assertAlmostEqual(stats['policy_loss'], -1.2 * 2.0)
        self.assertEqual(float(np.abs(flat(grads)).max()), 0.0)

    def test_zero_advantages_leave_only_value_and_entropy(self):
        batch = random_batch(self.network, self.rng)
        batch['advantages'] = np.zeros(8)

        stats, grads = ppo_loss_and_grad(self.network, batch, clip=0.2, value_coef=0.0, entropy_coef=0.0)

        self.assertEqual(stats['policy_loss'], 0.0)
        self.assertEqual(float(np.abs(flat(grads)).max()), 0.0)

    def _check_gradient(self, clip, value_coef, entropy_coef):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            network = PolicyNetwork(input_size=3, action_count=3, hidden=2, rng=rng)
            batch = random_batch(network, rng)

            _, analytic = ppo_loss_and_grad(network, batch, clip, value_coef, entropy_coef)
            numeric = numeric_gradient(network, batch, clip, value_coef, entropy_coef)

            a, n = flat(analytic), flat(numeric)
            error = np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
            self.assertLess(error, 1e-4, msg=f"seed {seed}")

    def test_policy_gradient_matches_finite_differences(self):
        self._check_gradient(clip=10.0, value_coef=0.0, entropy_coef=0.0)

    def test_value_gradient_matches_finite_differences(self):
        self._check_gradient(clip=0.2, value_coef=1.0, entropy_coef=0.0)

    def test_entropy_gradient_matches_finite_differences(self):
        self._check_gradient(clip=0.2, value_coef=0.0, entropy_coef=1.0)

    def test_total_gradient_matches_finite_differences(self):
        self._check_gradient(clip=0.2, value_coef=0.5, entropy_coef=0.01)

    def test_masked_actions_have_zero_probability(self):
        log_probs, allowed, active = masked_log_softmax(np.array([[1.0, 2.0, 3.0]]), np.array([[1, 1, 0]]))

        self.assertTrue(np.isneginf(log_probs[0, 2]))
        self.assertAlmostEqual(float(np.exp(log_probs[0, :2]).sum()), 1.0)
        self.assertTrue(active[0])


class PPOUpdateTestCase(SimpleTestCase):

    def _filled_buffer(self, network, rng, reward=1.0):
        buffer = RolloutBuffer()
        for step in range(32):
            features = rng.normal(size=network.input_size)
            buffer.add(features, step % 3, np.log(1 / 3), 0.0, [1, 1, 1], reward, step == 31, step == 31)
        return buffer

    def test_update_moves_parameters(self):
        rng = np.random.default_rng(1)
        network = PolicyNetwork(4, 3, hidden=8, rng=rng)
        before = network.copy_params()

        stats = ppo_update(network, AdamOptimizer(1e-2), self._filled_buffer(network, rng),
                           PPOConfig(minibatch=8, epochs=2), rng)

        self.assertFalse(stats['aborted'])
        self.assertTrue(any(not np.allclose(before[n], network.params[n]) for n in PARAM_NAMES))

    def test_nan_loss_aborts_and_restores(self):
        rng = np.random.default_rng(2)
        network = PolicyNetwork(4, 3, hidden=8, rng=rng)
        before = network.copy_params()

        with self.assertLogs('agents.services', level='ERROR'):
            stats = ppo_update(network, AdamOptimizer(1e-2), self._filled_buffer(network, rng, reward=np.nan),
                               PPOConfig(minibatch=8), rng)

        self.assertTrue(stats['aborted'])
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(before[name], network.params[name])


class ShieldedAgentTestCase(SimpleTestCase):
    """
    Tests pour l'échantillonnage masqué et l'enregistrement des erreurs
    """

    def setUp(self):
        self.layout = build_layout('adversarial')
        self.env = LavaGridEnvironment(self.layout)
        self.obs = self.env.reset(seed=0)
        self.key = self.env.state_key()

    def _agent(self, shield=None, **kwargs):
        return PPOAgent(self.env.spec, PPOConfig(segment=64), np.random.default_rng(3), shield=shield, **kwargs)

    def test_empty_shield_keeps_raw_softmax(self):
        agent = self._agent(TabularShield())
        decision = agent.decide(self.obs, self.key)

        logits, _, _ = agent.network.forward(decision.features)
        raw = np.exp(logits[0] - logits[0].max())
        np.testing.assert_allclose(decision.distribution, raw / raw.sum())

    def test_blocked_action_is_never_sampled(self):
        shield = TabularShield([ShieldKey(self.key, ACTION_FORWARD)])
        agent = self._agent(shield)

        actions = {agent.sample_action(self.obs, self.key)[0] for _ in range(300)}

        self.assertNotIn(ACTION_FORWARD, actions)
        self.assertEqual(agent.decide(self.obs, self.key).distribution[ACTION_FORWARD], 0.0)

    def test_greedy_returns_argmax_of_shielded_distribution(self):
        shield = TabularShield([ShieldKey(self.key, 1)])
        agent = self._agent(shield)

        decision = agent.decide(self.obs, self.key, greedy=True)

        self.assertEqual(decision.action, int(np.argmax(decision.distribution)))
        self.assertNotEqual(decision.action, 1)

    def test_log_prob_is_taken_under_the_shielded_distribution(self):
        shield = TabularShield([ShieldKey(self.key, 0)])
        agent = self._agent(shield)

        decision = agent.decide(self.obs, self.key)

        self.assertAlmostEqual(decision.log_prob, float(np.log(decision.distribution[decision.action])))

    def test_non_finite_logits_raise(self):
        agent = self._agent()
        agent.network.params['W1'][:] = np.nan

        with self.assertRaises(NumericalError) as ctx:
            agent.sample_action(self.obs, self.key)

        self.assertIn('param_norms', ctx.exception.dump)

    def _transition(self, label):
        return Transition(self.key, self.obs, ACTION_FORWARD, -1000.0, self.obs, True, label)

    def test_safe_transition_is_a_no_op(self):
        shield = TabularShield()
        agent = self._agent(shield)

        agent.record_mistakes(self._transition(SAFE))

        self.assertEqual(len(shield), 0)
        self.assertEqual(agent.mistake_log, [])

    def test_unsafe_transition_is_recorded(self):
        shield = TabularShield()
        agent = self._agent(shield)

        agent.record_mistakes(self._transition(UNSAFE), episode=4, step=9)

        self.assertEqual(shield.query(ShieldKey(self.key, ACTION_FORWARD)), UNSAFE)
        self.assertEqual(agent.mistake_log, [MistakeEntry(4, 9, 0, ShieldKey(self.key, ACTION_FORWARD))])

    def test_shared_shield_blocks_the_other_agent(self):
        """Test : une erreur de l'agent A bloque l'agent B à la première rencontre"""
        shield = TabularShield()
        ledger = MistakeLedger()
        agent_a = self._agent(shield, agent_id=0, ledger=ledger)
        agent_b = self._agent(shield, agent_id=1, ledger=ledger)

        agent_a.record_mistakes(self._transition(UNSAFE))

        self.assertEqual(agent_b.action_mask(self.key)[ACTION_FORWARD], 0)

    def test_ledger_counts_repeats(self):
        agent = self._agent()

        self.assertFalse(agent.record_mistakes(self._transition(UNSAFE)))
        self.assertTrue(agent.record_mistakes(self._transition(UNSAFE)))
        self.assertEqual(agent.ledger.repeated, 1)

    def test_shieldppo_never_repeats_on_a_lava_corridor(self):
        """Test : ShieldPPO sur le couloir à lave, aucune paire commise deux fois"""
        lava = LavaConfig.from_symbols('R')
        instance = LavaInstance(lava, clustering_for(self.layout).cluster_of(lava))
        shield = TabularShield()
        agent = self._agent(shield)
        for episode in range(60):
            obs = self.env.reset(seed=episode, instance=instance)
            step = 0
            while not self.env.done:
                decision = agent.decide(obs, self.env.state_key())
                transition = self.env.step(decision.action)
                agent.record_mistakes(transition, episode, step)
                agent.store(decision, transition)
                obs = transition.next_obs
                step += 1
            if agent.ready():
                agent.update()

        self.assertEqual(agent.ledger.repeated, 0)
        keys = [entry.key for entry in agent.mistake_log]
        self.assertEqual(len(keys), len(set(keys)))
        self.assertGreater(agent.update_count, 0)


class PersistenceTestCase(SimpleTestCase):

    def test_checkpoint_round_trip(self):
        network = PolicyNetwork(5, 3, hidden=4, rng=np.random.default_rng(8))
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(network, Path(tmp) / 'agent-0.ckpt')
            params = load_checkpoint(path)

        restored = PolicyNetwork(5, 3, hidden=4)
        restored.load_params(params)
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(restored.params[name], network.params[name])

    def test_checkpoint_bad_magic(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'bad.ckpt'
            path.write_bytes(b'NOPE' + b'\x00' * 20)
            with self.assertRaises(CheckpointFormatError):
                load_checkpoint(path)

    def test_shape_mismatch_rejected(self):
        params = PolicyNetwork(5, 3, hidden=4).copy_params()

        with self.assertRaises(CheckpointFormatError):
            PolicyNetwork(6, 3, hidden=4).load_params(params)

    def test_mistake_log_round_trip(self):
        entries = [MistakeEntry(1, 2, 0, make_key(3)), MistakeEntry(5, 0, 7, make_key(4, action=1))]
        with tempfile.TemporaryDirectory() as tmp:
            path = write_mistake_log(entries, Path(tmp) / 'mistakes.csv')
            header = path.read_text().splitlines()[0]
            restored = read_mistake_log(path)

        self.assertEqual(header, 'episode,step,agent,key')
        self.assertEqual(restored, entries)


@tag('slow')
class PlainPPOSanityTestCase(SimpleTestCase):
    """
    PPO sans bouclier sur une salle 5x5 sans lave : mieux que tourner sur place
    """

    def test_beats_the_always_turn_policy(self):
        layout = build_layout('open')
        for seed in range(5):
            env = LavaGridEnvironment(layout)
            agent = PPOAgent(env.spec, PPOConfig(segment=256, learning_rate=1e-3), np.random.default_rng(seed))
            returns = []
            for episode in range(2000):
                obs = env.reset(seed=seed * 10_000 + episode)
                total = 0.0
                while not env.done:
                    decision = agent.decide(obs, env.state_key())
                    transition = env.step(decision.action)
                    agent.store(decision, transition)
                    total += transition.reward
                    obs = transition.next_obs
                returns.append(total)
                if agent.ready():
                    agent.update()

            env.reset(seed=0)
            turning = sum(env.step(0).reward for _ in range(layout.default_max_steps))
            self.assertGreater(np.mean(returns[-50:]), turning, msg=f"seed {seed}")
