from dataclasses import replace

import numpy as np
from django.test import SimpleTestCase

from pomdp.services import CELL_FLOOR, CELL_OUT_OF_BOUNDS, CELL_WALL, SAFE, UNSAFE, StateKey
from shields.services import ShieldKey
from .exceptions import InstanceFormatError, LavaGridError, OracleRefusedError, ScheduleCalibrationError
from .services import (
    ACTION_FORWARD, ACTION_LEFT, ACTION_RIGHT, InstanceClustering, LavaConfig, LavaGridEnvironment,
    LavaInstance, build_layout, catastrophic_set, clustering_for, config_probability,
    configuration_count, lava_reward, parse_instance_record, parse_layout, path_distances,
    sample_assignments, sample_instance, tile_schedule,
)


def with_probs(layout, probability):
    return replace(layout, tile_probs=tuple(probability for _ in layout.lava_eligible))


def instance_for(layout, symbols):
    config = LavaConfig.from_symbols(symbols)
    return LavaInstance(config, clustering_for(layout).cluster_of(config))


class LayoutTestCase(SimpleTestCase):
    """
    Tests pour les plans de grille
    """

    def test_full_layout_has_42_eligible_tiles(self):
        layout = build_layout('full')

        self.assertEqual(len(layout.lava_eligible), 42)
        self.assertNotIn(layout.start, layout.lava_eligible)
        self.assertNotIn(layout.goals[0], layout.lava_eligible)

    def test_configuration_count(self):
        """Test : 4^42 configurations, soit environ 2 x 10^25"""
        count = configuration_count(build_layout('full'))

        self.assertEqual(count, 19_342_813_113_834_066_795_298_816)
        self.assertTrue(1.9e25 <= count <= 2.0e25)

    def test_desk_and_goal_layouts(self):
        desk = build_layout('desk')
        goal = build_layout('goal')

        self.assertEqual((desk.width, desk.height), (8, 8))
        self.assertEqual(len(desk.lava_eligible), 12)
        self.assertEqual(len(goal.goals), 3)
        self.assertTrue(all(p == 0.005 for p in goal.tile_probs))

    def test_unknown_layout_rejected(self):
        with self.assertRaises(LavaGridError):
            build_layout('volcano')

    def test_unreachable_cell_rejected(self):
        with self.assertRaises(LavaGridError):
            parse_layout('broken', ['S#L', '##.', '..0'])

    def test_max_l1_ignores_walls(self):
        layout = parse_layout('seven', ['S......'] + ['.......'] * 5 + ['......0'])

        self.assertEqual(layout.max_l1, 12)
        self.assertEqual(layout.default_max_steps, 56)


class TileScheduleTestCase(SimpleTestCase):
    """
    Tests pour le calendrier de probabilités de lave
    """

    def test_uniform_schedule_closed_form(self):
        """Test : growth = 1 donne p = 1 - 0.94^(1/42) sur chaque case"""
        probs = tile_schedule(build_layout('full'), growth=1.0)

        expected = 1 - 0.94 ** (1 / 42)
        self.assertAlmostEqual(expected, 0.001472, places=6)
        for p in probs:
            self.assertAlmostEqual(p, expected, places=9)

    def test_product_is_calibrated(self):
        for name in ('full', 'desk'):
            layout = build_layout(name, growth=1.3)

            self.assertAlmostEqual(layout.no_lava_probability(), 0.94, delta=1e-4)

    def test_schedule_grows_along_the_path(self):
        layout = build_layout('full', growth=1.25)
        distances = path_distances(layout)
        pairs = sorted(
            (distances[cell], p) for cell, p in zip(layout.lava_eligible, layout.tile_probs)
        )

        for (d1, p1), (d2, p2) in zip(pairs, pairs[1:]):
            if d1 < d2:
                self.assertLessEqual(p1, p2)

    def test_infeasible_calibration_raises(self):
        with self.assertRaises(ScheduleCalibrationError):
            tile_schedule(build_layout('desk'), p_cap=1e-4)
        with self.assertRaises(ScheduleCalibrationError):
            tile_schedule(build_layout('desk'), growth=0.5)


class SamplingTestCase(SimpleTestCase):
    """
    Tests pour le tirage à longue traîne des instances
    """

    def test_long_tail_calibration(self):
        """Test : 10^6 tirages, P(aucune lave) = 0.94 et types (0.94, 0.05, 0.01)"""
        layout = build_layout('full')
        rng = np.random.default_rng(20240601)

        assignments = sample_assignments(layout, rng, 1_000_000)

        no_lava = float(np.mean(~assignments.any(axis=1)))
        self.assertAlmostEqual(no_lava, 0.94, delta=0.003)
        lava = assignments[assignments > 0]
        frequencies = np.bincount(lava, minlength=4)[1:] / lava.size
        for measured, expected in zip(frequencies, (0.94, 0.05, 0.01)):
            self.assertAlmostEqual(measured, expected, delta=0.005)

    def test_tail_cluster_matches_its_analytic_mass(self):
        layout = build_layout('desk')
        clustering = clustering_for(layout)
        rng = np.random.default_rng(7)

        ids = clustering.cluster_ids(sample_assignments(layout, rng, 1_000_000))

        mass = clustering.tail_mass
        sigma = np.sqrt(mass * (1 - mass) / len(ids))
        self.assertLessEqual(abs(np.mean(ids == clustering.tail_id) - mass), 3 * sigma + 1e-6)
        self.assertAlmostEqual(np.mean(ids == 0), 0.94, delta=0.003)

    def test_zero_schedule_always_gives_the_empty_config(self):
        layout = with_probs(build_layout('desk'), 0.0)
        rng = np.random.default_rng(3)

        for _ in range(100):
            config, index = sample_instance(layout, rng)
            self.assertEqual(config.lava_count, 0)
            self.assertEqual(index.cluster_id, 0)

    def test_same_seed_same_instance(self):
        layout = build_layout('desk')
        a = sample_instance(layout, np.random.default_rng(99))
        b = sample_instance(layout, np.random.default_rng(99))

        self.assertEqual(a, b)

    def test_goal_schedule_is_flat(self):
        """Test : 0.5 % de lave par case quelle que soit sa position"""
        layout = build_layout('goal')

        assignments = sample_assignments(layout, np.random.default_rng(5), 100_000)

        per_tile = np.mean(assignments > 0, axis=0)
        self.assertAlmostEqual(float(per_tile.mean()), 0.005, delta=0.0005)
        self.assertTrue(np.all(np.abs(per_tile - 0.005) < 0.0015))


class ClusteringTestCase(SimpleTestCase):
    """
    Tests pour le regroupement des configurations rares
    """

    def test_empty_config_first_and_tail_last(self):
        layout = build_layout('desk')
        clustering = clustering_for(layout)

        self.assertEqual(clustering.cluster_of(LavaConfig.empty(12)), 0)
        self.assertEqual(clustering.tail_id, clustering.cluster_count - 1)
        self.assertLessEqual(clustering.cluster_count, 4096)
        self.assertEqual(clustering.probabilities, sorted(clustering.probabilities, reverse=True))

    def test_rare_configs_fall_into_the_tail(self):
        layout = build_layout('desk')
        clustering = clustering_for(layout)
        rare = LavaConfig.from_symbols('PPPP........')

        self.assertLess(config_probability(layout, rare), 2e-8)
        self.assertEqual(clustering.cluster_of(rare), clustering.tail_id)

    def test_every_enumerated_config_is_above_threshold(self):
        layout = build_layout('desk')
        clustering = clustering_for(layout)

        for config, probability in zip(clustering.configs, clustering.probabilities):
            self.assertGreaterEqual(probability, 2e-8)
            self.assertAlmostEqual(config_probability(layout, config), probability)

    def test_cluster_cap_overflows_into_tail(self):
        layout = build_layout('desk')
        clustering = InstanceClustering(layout, max_clusters=10)

        self.assertEqual(clustering.cluster_count, 10)
        self.assertGreater(clustering.tail_mass, 0.0)


class ObservationTestCase(SimpleTestCase):
    """
    Tests pour la fenêtre d'observation égocentrique
    """

    def setUp(self):
        self.layout = build_layout('desk')
        self.env = LavaGridEnvironment(self.layout)

    def test_wall_one_cell_ahead(self):
        self.env.reset(seed=0, instance=instance_for(self.layout, '.' * 12))
        self.env.position, self.env.facing = (4, 1), 0

        obs = self.env.observe()

        self.assertEqual(obs.window[3, 2], CELL_WALL)
        self.assertEqual(obs.window[4, 2], CELL_FLOOR)

    def test_out_of_bounds_at_the_start(self):
        """Test : à gauche du départ (orienté est), on sort de la grille"""
        obs = self.env.reset(seed=0, instance=instance_for(self.layout, '.' * 12))

        self.assertEqual(obs.window[4, 0], CELL_OUT_OF_BOUNDS)
        self.assertEqual(obs.window[4, 1], CELL_OUT_OF_BOUNDS)
        self.assertEqual(obs.window[4, 3], CELL_FLOOR)

    def test_lava_is_rendered_as_floor(self):
        """Test : deux instances ne différant que par la lave ont la même fenêtre"""
        lava = instance_for(self.layout, 'R' + '.' * 11)
        empty = instance_for(self.layout, '.' * 12)
        self.env.reset(seed=0, instance=lava)
        self.env.position, self.env.facing = (0, 1), 0
        with_lava = self.env.observe()
        self.env.reset(seed=0, instance=empty)
        self.env.position, self.env.facing = (0, 1), 0
        without_lava = self.env.observe()

        self.assertEqual(with_lava.window[2, 2], CELL_FLOOR)
        np.testing.assert_array_equal(with_lava.window, without_lava.window)
        self.assertEqual(with_lava.goal_delta, without_lava.goal_delta)
        self.assertNotEqual(with_lava.instance_index, without_lava.instance_index)

    def test_goal_is_rendered_as_floor(self):
        """Test : le but n'apparaît que dans goal_delta, jamais dans la fenêtre"""
        self.env.reset(seed=0, instance=instance_for(self.layout, '.' * 12))
        self.env.position, self.env.facing = (5, 7), 0

        obs = self.env.observe()

        self.assertEqual(self.env.goal, (7, 7))
        self.assertEqual(obs.window[2, 2], CELL_FLOOR)
        self.assertEqual(obs.goal_delta, (2, 0))

    def test_window_uses_wall_floor_and_out_of_bounds_only(self):
        layout = build_layout('goal')
        env = LavaGridEnvironment(layout, goal_conditioned=True)
        allowed = {CELL_OUT_OF_BOUNDS, CELL_FLOOR, CELL_WALL}
        for goal_index in range(len(layout.goals)):
            env.reset(seed=goal_index, goal_index=goal_index)
            for x, y in layout.open_cells:
                for facing in range(4):
                    env.position, env.facing = (x, y), facing
                    self.assertLessEqual(set(np.unique(env.observe().window).tolist()), allowed)

    def test_goal_delta_is_egocentric(self):
        obs = self.env.reset(seed=0, instance=instance_for(self.layout, '.' * 12))
        self.assertEqual(obs.goal_delta, (7, 7))

        self.env.facing = 1
        self.assertEqual(self.env.observe().goal_delta, (7, -7))

    def test_goal_delta_rotates_with_turns(self):
        """Test : tourner ne change pas la position mais fait tourner goal_delta"""
        self.env.reset(seed=0, instance=instance_for(self.layout, '.' * 12))

        right = self.env.step(ACTION_RIGHT)
        self.assertEqual(right.next_obs.goal_delta, (7, -7))
        self.env.step(ACTION_LEFT)
        left = self.env.step(ACTION_LEFT)
        self.assertEqual(left.next_obs.goal_delta, (-7, 7))
        self.assertEqual(self.env.position, self.layout.start)

        # demi-tour : le but est derrière et à gauche
        self.env.step(ACTION_LEFT)
        self.assertEqual(self.env.observe().goal_delta, (-7, -7))

    def test_tail_instance_onehot(self):
        clustering = clustering_for(self.layout)
        rare = instance_for(self.layout, 'PPPP........')

        obs = self.env.reset(seed=0, instance=rare)

        self.assertEqual(obs.instance_index, clustering.tail_id)
        self.assertEqual(obs.instance_onehot.size, clustering.cluster_count)


class DynamicsTestCase(SimpleTestCase):
    """
    Tests pour la dynamique et les récompenses
    """

    def test_rewards(self):
        layout = parse_layout('seven', ['S......'] + ['.......'] * 5 + ['......0'])

        self.assertEqual(lava_reward(layout, 'goal', (6, 6), (6, 6)), 10.0)
        self.assertEqual(lava_reward(layout, 'lava', (1, 1), (6, 6)), -1000.0)
        self.assertAlmostEqual(lava_reward(layout, 'move', (3, 3), (6, 6)), -0.5)
        self.assertAlmostEqual(lava_reward(layout, 'move', (3, 3), (6, 6), shaping_sign=1.0), 0.5)

    def test_stepping_into_lava(self):
        layout = build_layout('adversarial')
        env = LavaGridEnvironment(layout)
        instance = instance_for(layout, 'R')
        env.reset(seed=0, instance=instance)

        for action in (ACTION_FORWARD, ACTION_RIGHT, ACTION_FORWARD, ACTION_FORWARD, ACTION_LEFT):
            self.assertEqual(env.step(action).safety_label, SAFE)
        transition = env.step(ACTION_FORWARD)

        self.assertEqual(transition.safety_label, UNSAFE)
        self.assertTrue(transition.terminal)
        self.assertEqual(transition.reward, -1000.0)
        self.assertIn(ShieldKey(transition.state_key, ACTION_FORWARD), catastrophic_set(layout, instance))

    def test_reaching_the_goal(self):
        layout = build_layout('open')
        env = LavaGridEnvironment(layout)
        env.reset(seed=0)

        actions = [ACTION_FORWARD] * 4 + [ACTION_RIGHT] + [ACTION_FORWARD] * 4
        transitions = [env.step(action) for action in actions]

        self.assertTrue(transitions[-1].reached_goal)
        self.assertTrue(transitions[-1].terminal)
        self.assertEqual(transitions[-1].reward, 10.0)
        self.assertTrue(all(not t.terminal for t in transitions[:-1]))

    def test_bumping_into_the_edge_keeps_position(self):
        env = LavaGridEnvironment(build_layout('open'))
        env.reset(seed=0)
        env.step(ACTION_LEFT)
        transition = env.step(ACTION_FORWARD)

        self.assertEqual(env.position, (0, 0))
        self.assertEqual(transition.safety_label, SAFE)

    def test_truncation_after_default_max_steps(self):
        env = LavaGridEnvironment(build_layout('open'))
        env.reset(seed=0)
        transitions = [env.step(ACTION_LEFT) for _ in range(40)]

        self.assertTrue(transitions[-1].truncated)
        self.assertTrue(env.done)

    def test_goal_conditioned_mode_samples_every_goal(self):
        env = LavaGridEnvironment(build_layout('goal'), goal_conditioned=True)

        goals = set()
        for seed in range(60):
            env.reset(seed=seed)
            goals.add(env.goal_index)

        self.assertEqual(goals, {0, 1, 2})

    def test_instance_pool_cycles(self):
        layout = build_layout('adversarial')
        env = LavaGridEnvironment(layout, instance_pool=3, pool_seed=4)

        seen = []
        for seed in range(6):
            env.reset(seed=seed)
            seen.append(env.instance)

        self.assertEqual(seen[:3], seen[3:])

    def test_reset_is_deterministic(self):
        layout = build_layout('desk')
        a, b = LavaGridEnvironment(layout), LavaGridEnvironment(layout)

        self.assertEqual(a.reset(seed=12).to_bytes(), b.reset(seed=12).to_bytes())
        self.assertEqual(a.instance, b.instance)


class CatastrophicSetTestCase(SimpleTestCase):
    """
    Tests pour l'oracle des paires catastrophiques
    """

    def test_empty_config_has_no_catastrophes(self):
        layout = build_layout('desk')

        self.assertEqual(catastrophic_set(layout, instance_for(layout, '.' * 12)), set())

    def test_single_lava_cell_with_three_approaches(self):
        layout = replace(parse_layout('tiny', ['S#..', '.L..', '....', '...0']), tile_probs=(0.1,))
        instance = instance_for(layout, 'R')

        keys = catastrophic_set(layout, instance)

        cluster = instance.cluster_id
        expected = {
            ShieldKey(StateKey.pack(2, cluster, 0, 1, facing=0), ACTION_FORWARD),
            ShieldKey(StateKey.pack(2, cluster, 2, 1, facing=2), ACTION_FORWARD),
            ShieldKey(StateKey.pack(2, cluster, 1, 2, facing=3), ACTION_FORWARD),
        }
        self.assertEqual(keys, expected)

    def test_large_enumeration_refused(self):
        layout = build_layout('desk')

        with self.assertRaises(OracleRefusedError):
            catastrophic_set(layout, instance_for(layout, '.' * 12), max_states=10)

    def test_online_labels_match_the_oracle(self):
        """Test : 20 instances, 10^4 pas aléatoires, étiquette = appartenance à l'oracle"""
        layout = with_probs(build_layout('desk'), 0.1)
        env = LavaGridEnvironment(layout)
        rng = np.random.default_rng(11)
        steps = 0
        for seed in range(20):
            env.reset(seed=seed)
            oracle = catastrophic_set(layout, env.instance, env.goal_index)
            for _ in range(500):
                if env.done:
                    env.reset(seed=seed)
                transition = env.step(int(rng.integers(0, 3)))
                member = ShieldKey(transition.state_key, transition.action) in oracle
                self.assertEqual(transition.safety_label == UNSAFE, member)
                steps += 1

        self.assertEqual(steps, 10_000)


class InstanceRecordTestCase(SimpleTestCase):

    def test_record_round_trip(self):
        layout = build_layout('desk')
        config, index = sample_instance(layout, np.random.default_rng(1))
        instance = LavaInstance(config, index.cluster_id, 1)

        restored = parse_instance_record(instance.to_record(layout), layout)

        self.assertEqual(restored, instance)

    def test_bad_header(self):
        with self.assertRaises(InstanceFormatError) as ctx:
            parse_instance_record('hello\n', build_layout('desk'))

        self.assertEqual(ctx.exception.line, 1)

    def test_wrong_assignment_length(self):
        layout = build_layout('desk')
        text = 'shieldbench-instance 1\nlayout = desk\nseed = 1\ncluster = 0\nassignment = ...\n'

        with self.assertRaises(InstanceFormatError) as ctx:
            parse_instance_record(text, layout)

        self.assertEqual(ctx.exception.line, 5)

    def test_cluster_mismatch(self):
        layout = build_layout('desk')
        text = f'shieldbench-instance 1\nlayout = desk\nseed = \ncluster = 3\nassignment = {"." * 12}\n'

        with self.assertRaises(InstanceFormatError):
            parse_instance_record(text, layout)
