from django.test import SimpleTestCase

from .exceptions import EpisodeTerminatedError, InvalidActionError, StateKeyFormatError
from .services import (
    ChainEnvironment, EnvSpec, StateKey, ENV_TAG_LAVAGRID, STATE_KEY_SIZE, SAFE, UNSAFE,
)


class StateKeyTestCase(SimpleTestCase):
    """
    Tests pour l'encodage canonique des états
    """

    def test_equal_states_give_identical_bytes(self):
        """Test : deux états identiques donnent la même clé"""
        a = StateKey.pack(ENV_TAG_LAVAGRID, 3, 4, 5, facing=1, goal=0)
        b = StateKey.pack(ENV_TAG_LAVAGRID, 3, 4, 5, facing=1, goal=0)

        self.assertEqual(a, b)
        self.assertEqual(a.to_bytes(), b.to_bytes())
        self.assertEqual(hash(a), hash(b))

    def test_instance_enters_the_key(self):
        """Test : même position, instance différente -> clés différentes"""
        a = StateKey.pack(ENV_TAG_LAVAGRID, 0, 4, 5, facing=1)
        b = StateKey.pack(ENV_TAG_LAVAGRID, 1, 4, 5, facing=1)

        self.assertNotEqual(a, b)

    def test_round_trip_through_bytes(self):
        """Test : sérialisation / désérialisation sans perte"""
        key = StateKey.pack(ENV_TAG_LAVAGRID, 4095, 12, 7, facing=3, goal=2)
        restored = StateKey.from_bytes(key.to_bytes())

        self.assertEqual(restored, key)
        self.assertEqual(len(key.to_bytes()), STATE_KEY_SIZE)
        self.assertEqual(restored.unpack()['instance'], 4095)
        self.assertEqual(restored.unpack()['goal'], 2)

    def test_little_endian_layout(self):
        """Test : disposition binaire documentée"""
        key = StateKey.pack(ENV_TAG_LAVAGRID, 0x01020304, 0x0506, 0x0708, facing=2, goal=1)

        self.assertEqual(
            key.to_bytes(),
            bytes([1, 2, 0x04, 0x03, 0x02, 0x01, 0x06, 0x05, 0x08, 0x07, 2, 1]),
        )

    def test_wrong_size_rejected(self):
        with self.assertRaises(StateKeyFormatError):
            StateKey(b'\x01\x02')


class EnvSpecTestCase(SimpleTestCase):

    def test_invalid_spec_rejected(self):
        """Test : au moins deux actions et gamma dans (0, 1]"""
        with self.assertRaises(ValueError):
            EnvSpec(action_count=1, discount=0.9)
        with self.assertRaises(ValueError):
            EnvSpec(action_count=3, discount=0.0)
        with self.assertRaises(ValueError):
            EnvSpec(action_count=3, discount=1.5)
        self.assertEqual(EnvSpec(action_count=3, discount=1.0).discount, 1.0)


class ChainEnvironmentTestCase(SimpleTestCase):
    """
    Tests pour la chaîne de la section identification des erreurs
    """

    def test_reset_starts_at_first_state(self):
        """Test : la chaîne commence toujours en s_1"""
        env = ChainEnvironment(n=4)
        obs = env.reset(seed=7)

        self.assertEqual(env.position, 1)
        self.assertEqual(obs.goal_delta, (3, 0))
        self.assertEqual(env.state_key().unpack()['x'], 1)

    def test_reset_is_deterministic(self):
        """Test : même graine -> observations identiques octet pour octet"""
        env_a, env_b = ChainEnvironment(n=4), ChainEnvironment(n=4)

        self.assertEqual(env_a.reset(seed=11).to_bytes(), env_b.reset(seed=11).to_bytes())

    def test_first_action_is_the_labelled_mistake(self):
        """Test : l'action prise en s_1 est étiquetée 0, les suivantes sont sûres"""
        env = ChainEnvironment(n=3)
        env.reset(seed=0)

        first = env.step(1)
        self.assertEqual(first.safety_label, UNSAFE)
        self.assertEqual(env.position, 2)
        self.assertFalse(first.terminal)

        crash = env.step(0)
        self.assertEqual(crash.safety_label, SAFE)
        self.assertTrue(crash.terminal)
        self.assertEqual(crash.reward, ChainEnvironment.CRASH_REWARD)

    def test_labels_match_catastrophic_pairs(self):
        """Test : étiquette 0 <=> paire dans l'ensemble catastrophique"""
        env = ChainEnvironment(n=6)
        pairs = env.catastrophic_pairs()
        for action in (0, 1):
            env.reset(seed=action)
            while not env.done:
                transition = env.step(action)
                is_catastrophic = (transition.state_key, transition.action) in pairs
                self.assertEqual(transition.safety_label == UNSAFE, is_catastrophic)

    def test_stepping_finished_episode_raises(self):
        """Test : step() après la fin de l'épisode est une violation de contrat"""
        env = ChainEnvironment(n=2)
        env.reset(seed=0)
        env.step(0)

        with self.assertRaises(EpisodeTerminatedError):
            env.step(0)

    def test_invalid_action_raises(self):
        env = ChainEnvironment(n=4)
        env.reset(seed=0)

        with self.assertRaises(InvalidActionError):
            env.step(2)

    def test_truncation_by_max_steps(self):
        """Test : la troncature n'est pas un état terminal"""
        env = ChainEnvironment(n=10, max_steps=2)
        env.reset(seed=0)
        env.step(0)
        transition = env.step(0)

        self.assertTrue(transition.truncated)
        self.assertFalse(transition.terminal)
        self.assertTrue(env.done)

    def test_negative_seed_accepted(self):
        env = ChainEnvironment(n=3)
        obs = env.reset(seed=-1)

        self.assertEqual(obs.instance_index, 0)
