import math
import tempfile
import threading
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings as hypothesis_settings
from hypothesis import strategies as st

from pomdp.services import ENV_TAG_LAVAGRID, SAFE, UNSAFE, StateKey
from .exceptions import ShieldError, ShieldFormatError, ShieldMergeError, ShieldTrainingError
from .services import (
    BloomShield, BoundedShield, ParametricShield, SafeExperienceReservoir, ShieldKey, TabularShield,
    apply_shield, bloom_dimensions, deserialize, describe_shield, merge_shields,
    parametric_loss_and_grad, read_shield, serialize, train_parametric, write_shield,
)


def make_key(index: int, action: int = 2) -> ShieldKey:
    return ShieldKey(StateKey.pack(ENV_TAG_LAVAGRID, index, index % 13, index % 11, facing=index % 4), action)


class TabularShieldTestCase(SimpleTestCase):
    """
    Tests pour la table exacte
    """

    def test_empty_table_is_all_safe(self):
        shield = TabularShield()

        self.assertEqual(shield.query(make_key(1)), SAFE)
        self.assertEqual(len(shield), 0)

    def test_record_then_query(self):
        """Test : une paire enregistrée est bloquée"""
        shield = TabularShield()
        shield.record(make_key(5))

        self.assertEqual(shield.query(make_key(5)), UNSAFE)
        self.assertEqual(shield.query(make_key(5, action=1)), SAFE)

    def test_record_is_idempotent(self):
        shield = TabularShield()
        shield.record(make_key(5))
        shield.record(make_key(5))

        self.assertEqual(len(shield), 1)
        self.assertEqual(shield.insertion_counter, 1)

    def test_mask_covers_every_action(self):
        shield = TabularShield([make_key(3, action=0), make_key(3, action=2)])

        mask = shield.mask(make_key(3).state, 3)

        self.assertEqual(mask.tolist(), [0, 1, 0])

    @hypothesis_settings(max_examples=60, deadline=None)
    @given(
        recorded=st.lists(st.integers(0, 300), max_size=60),
        queried=st.lists(st.integers(0, 300), max_size=60),
    )
    def test_never_repeat_and_no_false_positive(self, recorded, queried):
        """Test : après record(k), query(k) = 0 ; jamais de faux positif"""
        shield = TabularShield()
        seen = set()
        for index in recorded:
            shield.record(make_key(index))
            seen.add(index)
            for earlier in seen:
                self.assertEqual(shield.query(make_key(earlier)), UNSAFE)
        for index in queried:
            expected = UNSAFE if index in seen else SAFE
            self.assertEqual(shield.query(make_key(index)), expected)

    def test_concurrent_records_are_all_visible(self):
        """Test : plusieurs workers partagent la même table"""
        shield = TabularShield()

        def worker(offset):
            for index in range(offset, offset + 500):
                shield.record(make_key(index))
                self.assertEqual(shield.query(make_key(index)), UNSAFE)

        threads = [threading.Thread(target=worker, args=(i * 250,)) for i in range(4)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()

        self.assertEqual(len(shield), 1250)
        self.assertTrue(all(shield.query(make_key(i)) == UNSAFE for i in range(1250)))


class BoundedShieldTestCase(SimpleTestCase):
    """
    Tests pour la table bornée (éviction LRU)
    """

    def test_least_recently_used_is_evicted(self):
        shield = BoundedShield(capacity=2)
        a, b, c = make_key(1), make_key(2), make_key(3)
        shield.record(a)
        shield.record(b)
        shield.record(c)

        self.assertEqual(shield.query(a), SAFE)
        self.assertEqual(shield.query(b), UNSAFE)
        self.assertEqual(shield.query(c), UNSAFE)
        self.assertEqual(shield.evictions, 1)

    def test_query_refreshes_recency(self):
        """Test : une requête compte comme un usage"""
        shield = BoundedShield(capacity=2)
        a, b, c = make_key(1), make_key(2), make_key(3)
        shield.record(a)
        shield.record(b)
        shield.query(a)
        shield.record(c)

        self.assertEqual(shield.query(a), UNSAFE)
        self.assertEqual(shield.query(b), SAFE)

    def test_size_never_exceeds_capacity(self):
        shield = BoundedShield(capacity=5)
        for index in range(50):
            shield.record(make_key(index))
            self.assertLessEqual(len(shield), 5)


class BloomShieldTestCase(SimpleTestCase):
    """
    Tests pour le filtre de Bloom
    """

    def test_dimensions_follow_closed_forms(self):
        self.assertEqual(bloom_dimensions(10_000, 0.01), (95851, 7))
        self.assertEqual(bloom_dimensions(1_000_000, 0.001), (14377588, 10))
        # ceil(ln 2 / (ln 2)^2) = ceil(1.4427) = 2 ; k = round(2 ln 2) = 1
        self.assertEqual(bloom_dimensions(1, 0.5), (2, 1))

    def test_dimensions_reject_bad_input(self):
        with self.assertRaises(ValueError):
            bloom_dimensions(0, 0.01)
        with self.assertRaises(ValueError):
            bloom_dimensions(10, 1.0)

    def test_record_increments_n(self):
        shield = BloomShield.for_capacity(100, 0.01)
        shield.record(make_key(1))

        self.assertEqual(shield.n, 1)
        self.assertEqual(shield.query(make_key(1)), UNSAFE)

    def test_saturated_filter_keeps_counting(self):
        """Test : une clé neuve en faux positif compte quand même dans n"""
        shield = BloomShield(m=8, k=1)
        for index in range(200):
            shield.record(make_key(index))

        self.assertEqual(shield.n, 200)
        self.assertEqual(bytes(shield.bits), b'\xff')
        self.assertGreater(shield.expected_fp_rate(), 0.99)
        self.assertEqual(describe_shield(shield)['n'], 200)

    def test_no_false_negatives(self):
        """Test : 10^5 clés enregistrées, aucune déclarée sûre"""
        shield = BloomShield.for_capacity(100_000, 0.01)
        keys = [make_key(i) for i in range(100_000)]
        for key in keys:
            shield.record(key)

        false_negatives = sum(1 for key in keys if shield.query(key) == SAFE)

        self.assertEqual(false_negatives, 0)

    def test_false_positive_rate_within_twice_target(self):
        """Test : taux de faux positifs mesuré <= 2p sur 10^5 clés neuves"""
        for target in (0.01, 0.001):
            shield = BloomShield.for_capacity(10_000, target)
            for i in range(10_000):
                shield.record(make_key(i))

            fresh = range(1_000_000, 1_100_000)
            false_positives = sum(1 for i in fresh if shield.query(make_key(i)) == UNSAFE)
            rate = false_positives / 100_000

            self.assertLessEqual(rate, 2 * target)
            expected = (1 - math.exp(-shield.k * shield.n / shield.m)) ** shield.k
            self.assertAlmostEqual(shield.expected_fp_rate(), expected)


class ApplyShieldTestCase(SimpleTestCase):
    """
    Tests pour la renormalisation par le bouclier
    """

    def test_renormalization(self):
        result = apply_shield([0.25, 0.25, 0.25, 0.25], [1, 1, 0, 1], [0.25] * 4)

        np.testing.assert_allclose(result, [1 / 3, 1 / 3, 0.0, 1 / 3])
        self.assertEqual(result[2], 0.0)

    def test_all_masked_returns_default(self):
        result = apply_shield([0.2, 0.3, 0.5], [0, 0, 0], [0.0, 0.0, 1.0])

        self.assertEqual(result.tolist(), [0.0, 0.0, 1.0])

    def test_all_safe_is_identity(self):
        probs = np.array([0.1, 0.6, 0.3])

        self.assertEqual(apply_shield(probs, [1, 1, 1], [1 / 3] * 3).tolist(), probs.tolist())

    def test_zero_mass_on_safe_actions_falls_back_to_uniform_safe(self):
        result = apply_shield([1.0, 0.0, 0.0], [0, 1, 1], [1.0, 0.0, 0.0])

        self.assertEqual(result.tolist(), [0.0, 0.5, 0.5])

    def test_random_pairs(self):
        """Test : 10^4 paires aléatoires (probs, masque)"""
        rng = np.random.default_rng(2024)
        for _ in range(10_000):
            size = int(rng.integers(2, 8))
            probs = rng.dirichlet(np.ones(size))
            mask = rng.integers(0, 2, size=size)
            default = rng.dirichlet(np.ones(size))

            result = apply_shield(probs, mask, default)

            self.assertAlmostEqual(result.sum(), 1.0, delta=1e-9)
            self.assertTrue(np.all(result >= 0.0))
            if mask.any():
                self.assertTrue(np.all(result[mask == 0] == 0.0))
                if mask[np.argmax(probs)]:
                    self.assertEqual(np.argmax(result), np.argmax(probs))
            else:
                self.assertEqual(result.tolist(), default.tolist())

    @hypothesis_settings(max_examples=200, deadline=None)
    @given(
        weights=st.lists(st.floats(0.0, 10.0), min_size=2, max_size=6),
        bits=st.lists(st.integers(0, 1), min_size=6, max_size=6),
    )
    def test_output_is_a_distribution(self, weights, bits):
        probs = np.array(weights) + 1e-3
        probs = probs / probs.sum()
        mask = np.array(bits[:len(probs)])
        default = np.full(len(probs), 1.0 / len(probs))

        result = apply_shield(probs, mask, default)

        self.assertAlmostEqual(result.sum(), 1.0, delta=1e-9)
        if mask.any():
            self.assertEqual(float(result[mask == 0].sum()), 0.0)

    def test_length_mismatch_rejected(self):
        with self.assertRaises(ValueError):
            apply_shield([0.5, 0.5], [1, 1, 1], [0.5, 0.5])


class SerializationTestCase(SimpleTestCase):
    """
    Tests pour le format binaire SHLD
    """

    def test_tabular_round_trip(self):
        shield = TabularShield([make_key(1), make_key(2), make_key(3)])

        restored = deserialize(serialize(shield))

        self.assertIsInstance(restored, TabularShield)
        self.assertEqual(restored.entries(), shield.entries())
        for index in list(range(1, 4)) + list(range(500, 600)):
            self.assertEqual(restored.query(make_key(index)), shield.query(make_key(index)))

    def test_equal_shields_give_identical_bytes(self):
        """Test : l'ordre d'insertion n'influence pas les octets"""
        a = TabularShield([make_key(3), make_key(1), make_key(2)])
        b = TabularShield([make_key(2), make_key(3), make_key(1)])

        self.assertEqual(serialize(a), serialize(b))
        self.assertTrue(serialize(a).startswith(b'SHLD\x01\x00\x01'))

    def test_bounded_round_trip_keeps_recency(self):
        shield = BoundedShield(capacity=3)
        for index in (1, 2, 3):
            shield.record(make_key(index))
        shield.query(make_key(1))

        restored = deserialize(serialize(shield))
        restored.record(make_key(4))

        self.assertEqual(restored.capacity, 3)
        self.assertEqual(restored.query(make_key(2)), SAFE)
        self.assertEqual(restored.query(make_key(1)), UNSAFE)

    def test_bloom_round_trip_keeps_bits(self):
        shield = BloomShield.for_capacity(1000, 0.01)
        for index in range(200):
            shield.record(make_key(index))

        restored = deserialize(serialize(shield))

        self.assertEqual(restored.bits, shield.bits)
        self.assertEqual((restored.m, restored.k, restored.n), (shield.m, shield.k, shield.n))
        for index in range(1000):
            self.assertEqual(restored.query(make_key(index)), shield.query(make_key(index)))

    def test_parametric_round_trip(self):
        shield = ParametricShield(np.linspace(-1, 1, 99), 0.25, action_count=3, threshold=0.4, positive_count=7)

        restored = deserialize(serialize(shield))

        np.testing.assert_array_equal(restored.weights, shield.weights)
        self.assertEqual(restored.threshold, 0.4)
        self.assertEqual(len(restored), 7)
        for index in range(50):
            self.assertEqual(restored.query(make_key(index)), shield.query(make_key(index)))

    def test_truncated_stream_reports_offset(self):
        data = serialize(TabularShield([make_key(1), make_key(2)]))

        with self.assertRaises(ShieldFormatError) as ctx:
            deserialize(data[:-5])

        self.assertEqual(ctx.exception.offset, 15)

    def test_bad_magic_rejected(self):
        with self.assertRaises(ShieldFormatError) as ctx:
            deserialize(b'NOPE\x01\x00\x01' + b'\x00' * 8)

        self.assertEqual(ctx.exception.offset, 0)

    def test_trailing_bytes_rejected(self):
        with self.assertRaises(ShieldFormatError):
            deserialize(serialize(TabularShield()) + b'\x00')

    def test_shared_through_a_file(self):
        """Test : bouclier écrit par un worker, relu par un autre"""
        writer = TabularShield([make_key(42)])
        with tempfile.TemporaryDirectory() as tmp:
            path = write_shield(writer, Path(tmp) / 'agent-a.shld')
            reader = read_shield(path)

        self.assertEqual(reader.query(make_key(42)), UNSAFE)


class MergeTestCase(SimpleTestCase):

    def test_union(self):
        merged = merge_shields([TabularShield([make_key(1)]), TabularShield([make_key(2)])])

        self.assertEqual(merged.entries(), sorted([make_key(1), make_key(2)]))

    def test_idempotent(self):
        shield = TabularShield([make_key(1), make_key(9)])

        self.assertEqual(serialize(merge_shields([shield, shield])), serialize(shield))

    def test_mixed_variants_rejected(self):
        with self.assertRaises(ShieldMergeError):
            merge_shields([TabularShield(), BloomShield.for_capacity(10, 0.1)])


class ParametricShieldTestCase(SimpleTestCase):
    """
    Tests pour le bouclier paramétrique (régression logistique)
    """

    def _toy_sets(self):
        states = [StateKey.pack(ENV_TAG_LAVAGRID, 0, x, 0, facing=f) for x in (0, 1) for f in (0, 1)]
        unsafe = {ShieldKey(state, 2) for state in states}
        safe = {ShieldKey(state, 0) for state in states}
        return unsafe, safe

    def test_separable_toy_set(self):
        """Test : 4 paires catastrophiques / 4 sûres séparées à 100 %"""
        unsafe, safe = self._toy_sets()

        shield = train_parametric(unsafe, safe, epochs=2000, learning_rate=0.05)

        self.assertTrue(all(shield.query(key) == UNSAFE for key in unsafe))
        self.assertTrue(all(shield.query(key) == SAFE for key in safe))
        self.assertEqual(len(shield), 4)

    def test_loss_is_non_increasing(self):
        unsafe, safe = self._toy_sets()

        shield = train_parametric(unsafe, safe, epochs=300, learning_rate=10.0)

        history = np.array(shield.loss_history)
        self.assertTrue(np.all(np.diff(history) <= 1e-6))

    def test_scores_lie_in_unit_interval(self):
        unsafe, safe = self._toy_sets()
        shield = train_parametric(unsafe, safe, epochs=50)

        for key in unsafe | safe:
            self.assertTrue(0.0 < shield.score(key) < 1.0)

    def test_empty_positives_rejected(self):
        with self.assertRaises(ShieldTrainingError):
            train_parametric(set(), {make_key(1)})

    def test_overlapping_sets_rejected(self):
        with self.assertRaises(ShieldTrainingError):
            train_parametric({make_key(1)}, {make_key(1)})

    def test_record_not_supported(self):
        unsafe, safe = self._toy_sets()
        shield = train_parametric(unsafe, safe, epochs=5)

        with self.assertRaises(ShieldError):
            shield.record(make_key(1))

    def test_gradient_matches_finite_differences(self):
        """Test : gradient analytique vs différences finies centrées, 10 graines"""
        for seed in range(10):
            rng = np.random.default_rng(seed)
            unsafe_x = rng.normal(size=(6, 10))
            safe_x = rng.normal(size=(9, 10))
            theta = rng.normal(size=11)

            _, grad = parametric_loss_and_grad(theta, unsafe_x, safe_x)
            numeric = np.zeros_like(theta)
            h = 1e-6
            for i in range(theta.size):
                step = np.zeros_like(theta)
                step[i] = h
                plus, _ = parametric_loss_and_grad(theta + step, unsafe_x, safe_x)
                minus, _ = parametric_loss_and_grad(theta - step, unsafe_x, safe_x)
                numeric[i] = (plus - minus) / (2 * h)

            error = np.linalg.norm(grad - numeric) / max(np.linalg.norm(grad), np.linalg.norm(numeric))
            self.assertLess(error, 1e-4)


class ReservoirTestCase(SimpleTestCase):

    def test_reservoir_is_bounded(self):
        reservoir = SafeExperienceReservoir(capacity=10, rng=np.random.default_rng(0))
        for index in range(1000):
            reservoir.add(make_key(index, action=0))

        self.assertEqual(len(reservoir.keys), 10)
        self.assertEqual(reservoir.seen, 1000)


class DescribeShieldTestCase(SimpleTestCase):

    def test_bloom_summary(self):
        shield = BloomShield.for_capacity(10_000, 0.01)
        shield.record(make_key(1))

        summary = describe_shield(shield)

        self.assertEqual(summary['variant'], 'bloom')
        self.assertEqual((summary['m'], summary['k'], summary['n']), (95851, 7, 1))

    def test_summary_survives_a_round_trip(self):
        """Test : un bouclier relu se décrit comme l'original"""
        bloom = BloomShield.for_capacity(500, 0.01)
        for index in range(40):
            bloom.record(make_key(index))
        parametric = ParametricShield(np.linspace(-1, 1, 99), 0.25, action_count=3, threshold=0.4, positive_count=7)

        for shield in (bloom, parametric):
            restored = deserialize(serialize(shield))
            self.assertEqual(describe_shield(restored), describe_shield(shield))
        self.assertIsNone(deserialize(serialize(bloom)).target_fp)

    def test_tabular_summary_decodes_keys(self):
        summary = describe_shield(TabularShield([make_key(7, action=1)]))

        self.assertEqual(summary['entries'], 1)
        self.assertEqual(summary['keys'][0]['instance'], 7)
        self.assertEqual(summary['keys'][0]['action'], 1)
