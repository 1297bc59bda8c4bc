import io
import json
import math
import tempfile
from contextlib import redirect_stderr
from pathlib import Path

from django.core.management import ManagementUtility, call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase, tag
from django.urls import reverse
from rest_framework import status
from rest_framework.test import APIClient

from agents.services import read_mistake_log
from lavagrid.services import ACTION_FORWARD
from pomdp.services import ENV_TAG_LAVAGRID, UNSAFE, StateKey, Transition
from shields.models import StoredShield
from shields.services import BloomShield, ShieldKey, TabularShield, read_shield, write_shield
from .exceptions import AggregationError, ConfigError
from .models import EpisodeMetric, ExperimentRun
from .services import (
    AGGREGATE_HEADER, METRICS_HEADER, AggregateRow, AggregateTable, EvaluationRow, MetricsRow, RunArtifact,
    TrainingRun, aggregate, episodes_to_threshold, load_config, mann_kendall, parse_config_text,
    persist_artifact, read_aggregate_csv, render_plot, run_experiment, run_goal_conditioned, run_multi,
    run_single, steps_to_greedy_success, symlog, validate_config, windowed_mistake_rates,
    write_aggregate_csv, write_experiment_outputs,
)

MICRO_CONFIG = """\
# configuration de test
[experiment]
name = micro
protocol = single
seeds = 0
episodes = 10

[environment]
layout = desk

[agent]
segment = 128
minibatch = 32
hidden = 16
"""

FAST_AGENT = {'segment': 64, 'minibatch': 32, 'hidden': 16}


def micro_config(**values):
    data = dict(FAST_AGENT)
    data.update({'seeds': '0', 'episodes': 5})
    data.update(values)
    return validate_config(data)


def fake_artifact(seed, returns, digest='digest', rates=None):
    rates = rates or [0.0] * len(returns)
    rows = [
        MetricsRow(seed, episode, float(value), 0, 10, rate, 0)
        for episode, (value, rate) in enumerate(zip(returns, rates))
    ]
    return RunArtifact(config={'protocol': 'single'}, digest=digest, seed=seed, rows=rows)


class ConfigParsingTestCase(SimpleTestCase):
    """Tests pour la lecture et la validation des configurations"""

    def test_micro_config_parses_with_line_numbers(self):
        values, lines = parse_config_text(MICRO_CONFIG)
        self.assertEqual(values['protocol'], 'single')
        self.assertEqual(lines['protocol'], 4)
        self.assertEqual(lines['hidden'], 14)

    def test_defaults_resolved(self):
        config = validate_config({'protocol': 'single'})
        self.assertEqual(config.seeds, (0, 1, 2, 3, 4))
        self.assertEqual(config.algorithm, 'shieldppo')
        self.assertEqual(config.shield_mode, 'individual')
        self.assertEqual(config.agent_count, 1)
        self.assertEqual(config.layout, 'desk')

    def test_multi_defaults_to_ten_agents(self):
        config = validate_config({'protocol': 'multi', 'shield_mode': 'shared'})
        self.assertEqual(config.agent_count, 10)
        self.assertEqual(config.algorithm, 'shieldppo')
        self.assertFalse(validate_config({'protocol': 'multi', 'shield_mode': 'none'}).shielded)

    def test_goal_protocol_uses_three_goal_layout(self):
        config = validate_config({'protocol': 'goal'})
        self.assertEqual(config.layout, 'goal')
        self.assertGreater(config.eval_every, 0)
        with self.assertRaises(ConfigError):
            validate_config({'protocol': 'goal', 'layout': 'desk'})

    def test_first_error_reports_its_line(self):
        text = "[experiment]\nprotocol = single\nepisodes = -3\n\n[agent]\nhidden = zero\n"
        values, lines = parse_config_text(text)
        with self.assertRaises(ConfigError) as ctx:
            validate_config(values, lines)
        self.assertEqual(ctx.exception.line, 3)
        self.assertIn('episodes', str(ctx.exception))

    def test_structural_errors(self):
        cases = {
            "protocol = single\n": 1,
            "[experiment]\nprotocol = single\nbogus = 1\n": 3,
            "[experiment]\nprotocol = single\n[agent]\nlayout = desk\n": 4,
            "[experiment]\nprotocol = single\nprotocol = multi\n": 3,
            "[nowhere]\n": 1,
            "[experiment]\njust some words\n": 2,
        }
        for text, line in cases.items():
            with self.subTest(text=text):
                with self.assertRaises(ConfigError) as ctx:
                    parse_config_text(text)
                self.assertEqual(ctx.exception.line, line)

    def test_protocol_consistent_fields(self):
        with self.assertRaises(ConfigError) as ctx:
            validate_config({'protocol': 'single', 'shield_mode': 'shared'})
        self.assertIn('shield_mode', str(ctx.exception))
        with self.assertRaises(ConfigError):
            validate_config({'protocol': 'multi'})
        with self.assertRaises(ConfigError):
            validate_config({'protocol': 'single', 'agent_count': 3})
        with self.assertRaises(ConfigError):
            validate_config({'protocol': 'single', 'seeds': ''})

    def test_overrides_and_missing_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'micro.cfg'
            path.write_text(MICRO_CONFIG)
            config = load_config(path, ['seeds=1,2,3', 'agent.hidden=8'])
            self.assertEqual(config.seeds, (1, 2, 3))
            self.assertEqual(config.hidden, 8)
            with self.assertRaises(ConfigError):
                load_config(path, ['environment.hidden=8'])
            with self.assertRaises(ConfigError) as ctx:
                load_config(path, ['episodes=-1'])
            self.assertIsNone(ctx.exception.line)

            missing = Path(tmp) / 'absent.cfg'
            with self.assertRaises(ConfigError) as ctx:
                load_config(missing)
            self.assertIn(str(missing), str(ctx.exception))

    def test_seed_offset_and_digest(self):
        config = validate_config({'protocol': 'single', 'seeds': '1,2'}, seed_offset=100)
        self.assertEqual(config.run_seeds, [101, 102])
        other = validate_config({'protocol': 'single', 'seeds': '5'})
        self.assertEqual(config.digest(), other.digest())
        self.assertNotEqual(config.digest(), validate_config({'protocol': 'single', 'episodes': 3}).digest())


class MetricHelpersTestCase(SimpleTestCase):
    """Tests pour les statistiques de résumé"""

    def test_symlog(self):
        self.assertAlmostEqual(symlog(-1000.0), -3.000434, places=6)
        self.assertEqual(symlog(0.0), 0.0)
        self.assertAlmostEqual(symlog(9.0), 1.0)

    def test_mann_kendall(self):
        rising = mann_kendall([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
        self.assertEqual(rising.s, 28)
        self.assertEqual(rising.trend, 'increasing')
        falling = mann_kendall([0.8, 0.6, 0.5, 0.3, 0.2, 0.1, 0.05, 0.0])
        self.assertEqual(falling.trend, 'decreasing')
        flat = mann_kendall([0.2] * 6)
        self.assertEqual(flat.z, 0.0)
        self.assertEqual(flat.trend, 'no trend')

    def test_windowed_mistake_rates(self):
        rows = [MetricsRow(0, i, 0.0, 1 if i < 2 else 0, 10, 0.0, 0) for i in range(8)]
        self.assertEqual(windowed_mistake_rates(rows, 4), [0.1, 0.0, 0.0, 0.0])
        self.assertEqual(windowed_mistake_rates([], 4), [])

    def test_episodes_to_threshold(self):
        rows = [MetricsRow(0, i, 0.0, 0, 10, 0.0, 0, goal_count=1 if i >= 3 else 0) for i in range(10)]
        self.assertEqual(episodes_to_threshold(rows, 1, 0.9, 2), 5)
        self.assertIsNone(episodes_to_threshold(rows[:4], 1, 0.9, 2))

    def test_steps_to_greedy_success(self):
        rows = [
            EvaluationRow(0, 10, 300, 0, 1.0), EvaluationRow(0, 10, 300, 1, 0.5),
            EvaluationRow(0, 20, 700, 0, 1.0), EvaluationRow(0, 20, 700, 1, 0.95),
        ]
        self.assertEqual(steps_to_greedy_success(rows, 0.9), 700)
        self.assertIsNone(steps_to_greedy_success(rows[:2], 0.9))


class AggregateTestCase(SimpleTestCase):
    """Tests pour l'agrégation entre graines"""

    def test_mean_and_standard_error(self):
        table = aggregate([fake_artifact(seed, [float(seed)]) for seed in range(1, 6)])
        row = table.rows[0]
        self.assertEqual(row.runs, 5)
        self.assertAlmostEqual(row.mean_return_mean, 3.0)
        self.assertAlmostEqual(row.mean_return_se, math.sqrt(2.5 / 5))
        self.assertFalse(table.degenerate)

    def test_single_run_is_degenerate(self):
        with self.assertLogs('experiments', level='WARNING'):
            table = aggregate([fake_artifact(0, [4.0, 2.0])])
        self.assertTrue(table.degenerate)
        self.assertEqual([row.mean_return_se for row in table.rows], [0.0, 0.0])

    def test_permutation_invariant(self):
        artifacts = [fake_artifact(seed, [seed * 0.1, seed * 0.7 + 0.3], rates=[0.01 * seed, 0.003]) for seed in range(6)]
        forward = aggregate(artifacts)
        backward = aggregate(list(reversed(artifacts)))
        self.assertEqual(forward.rows, backward.rows)
        self.assertEqual(forward.seeds, backward.seeds)

    def test_mismatched_configs_rejected(self):
        with self.assertRaises(AggregationError):
            aggregate([fake_artifact(0, [1.0]), fake_artifact(1, [1.0], digest='other')])
        with self.assertRaises(AggregationError):
            aggregate([fake_artifact(0, [1.0]), fake_artifact(1, [1.0, 2.0])])
        with self.assertRaises(AggregationError):
            aggregate([])


class ProtocolTestCase(SimpleTestCase):
    """Tests pour les trois protocoles sur des micro-configurations"""

    def test_zero_episodes_gives_empty_valid_artifact(self):
        artifact = run_single(micro_config(protocol='single', episodes=0), 0)
        self.assertEqual(artifact.rows, [])
        self.assertEqual(artifact.total_steps, 0)
        self.assertIn('agent-0', artifact.shields)
        self.assertEqual(artifact.summary()['final_quartile_return'], None)

    def test_protocol_mismatch_rejected(self):
        with self.assertRaises(ConfigError):
            run_multi(micro_config(protocol='single'), 0)

    def test_metrics_rows_are_consistent(self):
        artifact = run_single(micro_config(protocol='single', episodes=8), 3)
        self.assertEqual([row.episode for row in artifact.rows], list(range(8)))
        steps = mistakes = 0
        for row in artifact.rows:
            steps += row.step_count
            mistakes += row.mistake_count
            self.assertEqual(row.run_seed, 3)
            self.assertAlmostEqual(row.mistake_rate, mistakes / steps)
            self.assertTrue(0.0 <= row.mistake_rate <= 1.0)
        self.assertEqual(artifact.repeated_mistakes, 0)

    def test_identical_config_reproduces_rows(self):
        config = micro_config(protocol='single', episodes=6, seeds='11')
        first = run_experiment(config)
        second = run_experiment(config)
        self.assertEqual(first[0].rows, second[0].rows)
        self.assertEqual(first[0].mistake_log, second[0].mistake_log)

    def test_shieldppo_never_repeats_on_adversarial_layout(self):
        for variant in ('tabular', 'bounded', 'bloom'):
            with self.subTest(variant=variant):
                config = micro_config(protocol='single', layout='adversarial', episodes=60,
                                      seeds='0,1', shield_variant=variant)
                for artifact in run_experiment(config):
                    self.assertEqual(artifact.repeated_mistakes, 0)
                    self.assertLessEqual(artifact.total_mistakes, 6)

    def test_unshielded_multi_matches_independent_single_runs(self):
        multi = run_multi(micro_config(protocol='multi', shield_mode='none', agent_count=2, episodes=6), 7)
        single = run_single(micro_config(protocol='single', algorithm='ppo', episodes=6), 7)
        self.assertEqual([returns[0] for returns in multi.agent_returns],
                         [returns[0] for returns in single.agent_returns])

    def test_sequential_and_parallel_updates_agree(self):
        config = micro_config(protocol='multi', shield_mode='shared', agent_count=3, episodes=6)
        sequential = run_multi(config, 5, max_workers=1)
        parallel = run_multi(config, 5, max_workers=3)
        self.assertEqual(sequential.rows, parallel.rows)
        self.assertEqual(sequential.shields['shared'].entries(), parallel.shields['shared'].entries())

    def _mistake(self, trainer, index, goal_index=None):
        env = trainer.envs[index]
        obs = env.reset(seed=42, goal_index=goal_index)
        key = env.state_key()
        return key, Transition(key, obs, ACTION_FORWARD, -1000.0, obs, True, UNSAFE)

    def test_shared_shield_blocks_other_agents(self):
        trainer = TrainingRun(micro_config(protocol='multi', shield_mode='shared', agent_count=8), 0)
        key, transition = self._mistake(trainer, 3)
        self.assertFalse(trainer.agents[3].record_mistakes(transition))
        self.assertEqual(trainer.agents[7].action_mask(key)[ACTION_FORWARD], 0)
        self.assertTrue(trainer.agents[7].record_mistakes(transition))

    def test_agents_draw_their_own_instance_pools(self):
        config = micro_config(protocol='multi', shield_mode='none', agent_count=3, instance_pool=200)
        trainer = TrainingRun(config, 0)
        pools = [[instance.config.symbols() for instance in env.pool] for env in trainer.envs]

        self.assertNotEqual(pools[0], pools[1])
        self.assertNotEqual(pools[1], pools[2])
        again = TrainingRun(config, 0)
        self.assertEqual(pools[2], [instance.config.symbols() for instance in again.envs[2].pool])

    def test_individual_shields_are_private(self):
        trainer = TrainingRun(micro_config(protocol='multi', shield_mode='individual', agent_count=4), 0)
        key, transition = self._mistake(trainer, 1)
        trainer.agents[1].record_mistakes(transition)
        self.assertEqual(trainer.agents[1].action_mask(key)[ACTION_FORWARD], 0)
        self.assertEqual(trainer.agents[2].action_mask(key)[ACTION_FORWARD], 1)
        self.assertEqual(sorted(trainer.shields), ['agent-0', 'agent-1', 'agent-2', 'agent-3'])

    def test_goal_keys_are_per_goal(self):
        trainer = TrainingRun(micro_config(protocol='goal'), 0)
        key, transition = self._mistake(trainer, 0, goal_index=0)
        trainer.agents[0].record_mistakes(transition)
        self.assertEqual(trainer.agents[0].action_mask(key)[ACTION_FORWARD], 0)
        other_key, _ = self._mistake(trainer, 0, goal_index=1)
        self.assertEqual(other_key.unpack()['goal'], 1)
        self.assertEqual(trainer.agents[0].action_mask(other_key)[ACTION_FORWARD], 1)

    def test_goal_protocol_evaluates_every_goal(self):
        config = micro_config(protocol='goal', episodes=4, eval_every=2, eval_episodes=1)
        artifact = run_goal_conditioned(config, 0)
        self.assertEqual([(row.episode, row.goal_index) for row in artifact.evaluation_rows],
                         [(2, 0), (2, 1), (2, 2), (4, 0), (4, 1), (4, 2)])
        self.assertEqual(artifact.evaluation_rows[-1].env_steps, artifact.total_steps)
        for row in artifact.evaluation_rows:
            self.assertIn(row.success_rate, (0.0, 1.0))

    def test_parametric_probe_trains_on_recorded_mistakes(self):
        config = micro_config(protocol='single', episodes=0, parametric_probe=True, probe_epochs=50)
        trainer = TrainingRun(config, 0)
        key, transition = self._mistake(trainer, 0)
        trainer.agents[0].record_mistakes(transition)
        for action in (0, 1):
            trainer.reservoir.add(ShieldKey(key, action))
        artifact = trainer.run()
        self.assertIsNotNone(artifact.probe)
        self.assertEqual(artifact.probe_stats['positives'], 1)
        self.assertEqual(artifact.probe_stats['negatives'], 2)
        self.assertIn('parametric_probe', artifact.summary())


class OutputTestCase(SimpleTestCase):
    """Tests pour l'écriture des résultats et le tracé"""

    def test_experiment_outputs(self):
        config = micro_config(protocol='single', episodes=4, seeds='0,1', save_checkpoints=True)
        artifacts = run_experiment(config)
        with tempfile.TemporaryDirectory() as tmp:
            summary, paths = write_experiment_outputs(artifacts, tmp)
            directory = Path(tmp) / 'experiment'
            names = {path.name for path in paths}
            for expected in ('metrics_seed0.csv', 'metrics_seed1.csv', 'mistakes_seed0.csv',
                             'shield_seed0_agent-0.shld', 'checkpoint_seed1_agent0.ckpt',
                             'aggregate.csv', 'summary.json'):
                self.assertIn(expected, names)
            lines = (directory / 'metrics_seed0.csv').read_text().splitlines()
            self.assertEqual(lines[0], ','.join(METRICS_HEADER))
            self.assertEqual(len(lines), 5)
            aggregate_lines = (directory / 'aggregate.csv').read_text().splitlines()
            self.assertEqual(aggregate_lines[0], ','.join(AGGREGATE_HEADER))

            stored = json.loads((directory / 'summary.json').read_text())
            self.assertEqual(stored['seeds'], [0, 1])
            self.assertEqual(stored['config_digest'], config.digest())
            self.assertEqual(len(stored['runs']), 2)
            self.assertEqual(summary['totals']['repeated_mistakes'], 0)

    def _table(self, se):
        rows = [
            AggregateRow(episode, 5, -50.0 + episode, se, 0.01 / (episode + 1), 0.0, 0.2, 0)
            for episode in range(5)
        ]
        return AggregateTable('digest', [0, 1, 2, 3, 4], rows)

    def test_plot_has_band_and_legend(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_aggregate_csv(self._table(2.5), Path(tmp) / 'shieldppo' / 'aggregate.csv')
            svg = render_plot([('shieldppo', read_aggregate_csv(path))])
        self.assertIn('class="se-band"', svg)
        self.assertEqual(svg.count('class="legend-entry"'), 1)
        self.assertTrue(svg.startswith('<svg'))

    def test_plot_without_spread_has_no_band(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_aggregate_csv(self._table(0.0), Path(tmp) / 'aggregate.csv')
            svg = render_plot([('a', read_aggregate_csv(path)), ('b', read_aggregate_csv(path))])
        self.assertNotIn('se-band', svg)
        self.assertEqual(svg.count('class="legend-entry"'), 2)


class ShieldbenchCommandTestCase(TestCase):
    """Tests de bout en bout de la commande shieldbench"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.config_path = self.root / 'micro.cfg'
        self.config_path.write_text(MICRO_CONFIG)

    def tearDown(self):
        self.tmp.cleanup()

    def call(self, *args):
        out = io.StringIO()
        call_command('shieldbench', *[str(arg) for arg in args], stdout=out)
        return out.getvalue()

    def test_validate(self):
        output = self.call('validate', '--config', self.config_path, '--quiet')
        self.assertIn('OK: micro', output)

    def test_run_with_seed_override(self):
        out_dir = self.root / 'out'
        output = self.call('run', '--config', self.config_path, '--set', 'seeds=1,2,3', '--out', out_dir, '--quiet')
        written = sorted(path.name for path in (out_dir / 'micro').glob('metrics_seed*.csv'))
        self.assertEqual(written, ['metrics_seed1.csv', 'metrics_seed2.csv', 'metrics_seed3.csv'])
        self.assertIn('micro [single]', output)
        self.assertEqual(ExperimentRun.objects.count(), 0)

    def test_rerun_gives_identical_csv_bytes(self):
        outputs = []
        for name in ('first', 'second'):
            self.call('run', '--config', self.config_path, '--out', self.root / name, '--quiet')
            outputs.append({
                path.name: path.read_bytes()
                for path in sorted((self.root / name / 'micro').glob('*.csv'))
            })
        self.assertEqual(outputs[0], outputs[1])
        self.assertIn('aggregate.csv', outputs[0])

    def test_persist(self):
        self.call('run', '--config', self.config_path, '--set', 'seeds=0,1', '--out', self.root, '--persist', '--quiet')
        self.assertEqual(ExperimentRun.objects.count(), 2)
        run = ExperimentRun.objects.get(seed=1)
        self.assertEqual(run.metrics.count(), 10)
        self.assertEqual(run.shields.get().name, 'agent-0')

    def test_missing_config_exits_2(self):
        missing = self.root / 'nope.cfg'
        with self.assertRaises(CommandError) as ctx:
            self.call('run', '--config', missing)
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn(str(missing), str(ctx.exception))

    def test_invalid_config_reports_line(self):
        self.config_path.write_text("[experiment]\nprotocol = single\nepisodes = many\n")
        with self.assertRaises(CommandError) as ctx:
            self.call('validate', '--config', self.config_path)
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn('line 3', str(ctx.exception))

    def test_unknown_flag_exits_2(self):
        with self.assertRaises(CommandError) as ctx:
            self.call('run', '--config', self.config_path, '--bogus')
        self.assertEqual(ctx.exception.returncode, 2)

    def test_unknown_verb_from_command_line_exits_2(self):
        with redirect_stderr(io.StringIO()):
            with self.assertRaises(SystemExit) as ctx:
                ManagementUtility(['manage.py', 'shieldbench', 'frobnicate']).execute()
        self.assertEqual(ctx.exception.code, 2)

    def test_shield_inspect_and_merge(self):
        a = ShieldKey(StateKey.pack(ENV_TAG_LAVAGRID, 0, 1, 2, 0), ACTION_FORWARD)
        b = ShieldKey(StateKey.pack(ENV_TAG_LAVAGRID, 3, 4, 1, 2), 0)
        first = write_shield(TabularShield([a]), self.root / 'a.shld')
        second = write_shield(TabularShield([b]), self.root / 'b.shld')
        merged_path = self.root / 'merged.shld'

        self.call('shield-merge', first, second, '--out', merged_path)
        merged = read_shield(merged_path)
        self.assertEqual(merged.entries(), sorted([a, b]))

        self.call('shield-merge', merged_path, merged_path, '--out', self.root / 'again.shld')
        self.assertEqual((self.root / 'again.shld').read_bytes(), merged_path.read_bytes())

        summary = json.loads(self.call('shield-inspect', merged_path, '--json'))
        self.assertEqual(summary[0]['variant'], 'tabular')
        self.assertEqual(summary[0]['entries'], 2)

    def test_merge_rejects_mixed_variants(self):
        tabular = write_shield(TabularShield(), self.root / 'a.shld')
        bloom = write_shield(BloomShield.for_capacity(100, 0.01), self.root / 'b.shld')
        with self.assertRaises(CommandError) as ctx:
            self.call('shield-merge', tabular, bloom, '--out', self.root / 'merged.shld')
        self.assertEqual(ctx.exception.returncode, 1)
        self.assertFalse((self.root / 'merged.shld').exists())

    def test_merged_agent_shields_block_every_logged_mistake(self):
        self.config_path.write_text(
            "[experiment]\nname = group\nprotocol = multi\nshield_mode = individual\nagent_count = 3\n"
            "seeds = 0\nepisodes = 30\n\n[environment]\nlayout = adversarial\n\n"
            "[agent]\nsegment = 128\nminibatch = 32\nhidden = 16\n"
        )
        self.call('run', '--config', self.config_path, '--out', self.root, '--quiet')
        directory = self.root / 'group'
        shields = sorted(directory.glob('shield_seed0_agent-*.shld'))
        self.assertEqual(len(shields), 3)
        self.call('shield-merge', *shields, '--out', self.root / 'merged.shld')

        merged = read_shield(self.root / 'merged.shld')
        keys = {entry.key for entry in read_mistake_log(directory / 'mistakes_seed0.csv')}
        self.assertEqual(len(merged), len(keys))
        for key in keys:
            self.assertEqual(merged.query(key), UNSAFE)

    def test_plot_command(self):
        self.call('run', '--config', self.config_path, '--set', 'seeds=0,1,2', '--out', self.root, '--quiet')
        source = self.root / 'micro' / 'aggregate.csv'
        self.call('plot', source, '--out', self.root / 'one.svg')
        self.call('plot', source, '--out', self.root / 'two.svg')
        first = (self.root / 'one.svg').read_bytes()
        self.assertEqual(first, (self.root / 'two.svg').read_bytes())
        self.assertEqual(first.count(b'class="legend-entry"'), 1)

    def test_plot_empty_csv_fails_without_output(self):
        empty = self.root / 'aggregate.csv'
        empty.write_text(','.join(AGGREGATE_HEADER) + '\n')
        with self.assertRaises(CommandError) as ctx:
            self.call('plot', empty, '--out', self.root / 'plot.svg')
        self.assertEqual(ctx.exception.returncode, 1)
        self.assertFalse((self.root / 'plot.svg').exists())


class ResultsApiTestCase(TestCase):
    """Tests pour l'API de consultation des runs archivés"""

    @classmethod
    def setUpTestData(cls):
        config = micro_config(protocol='single', episodes=3, seeds='0,1')
        cls.digest = config.digest()
        cls.runs = [persist_artifact(artifact) for artifact in run_experiment(config)]

    def setUp(self):
        self.client = APIClient()

    def test_list_and_filter(self):
        response = self.client.get(reverse('experiments:run_list'))
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertEqual(response.data['count'], 2)
        response = self.client.get(reverse('experiments:run_list'), {'seed': 1})
        self.assertEqual(response.data['count'], 1)
        self.assertEqual(response.data['results'][0]['seed'], 1)

    def test_detail_metrics_and_shield(self):
        run = self.runs[0]
        response = self.client.get(reverse('experiments:run_detail', kwargs={'pk': run.id}))
        self.assertEqual(response.data['config_digest'], self.digest)
        self.assertEqual(response.data['shield_count'], 1)

        response = self.client.get(reverse('experiments:run_metrics', kwargs={'run_id': run.id}))
        self.assertEqual([row['episode'] for row in response.data['results']], [0, 1, 2])

        response = self.client.get(reverse('experiments:run_shield', kwargs={'run_id': run.id}))
        self.assertEqual(response.data['shields'][0]['summary']['variant'], 'tabular')

    def test_summary(self):
        response = self.client.get(reverse('experiments:run_summary'), {'digest': self.digest})
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertEqual(response.data['seeds'], [0, 1])
        self.assertEqual(len(response.data['episodes']), 3)
        expected = sum(run.total_mistakes for run in self.runs)
        self.assertEqual(response.data['totals']['mistakes'], expected)

        self.assertEqual(self.client.get(reverse('experiments:run_summary')).status_code, status.HTTP_400_BAD_REQUEST)
        response = self.client.get(reverse('experiments:run_summary'), {'digest': 'unknown'})
        self.assertEqual(response.status_code, status.HTTP_404_NOT_FOUND)

    def test_corrupt_shield_payload_returns_400(self):
        run = self.runs[1]
        StoredShield.objects.filter(run=run).update(payload=b'SHLD junk')
        with self.assertLogs('shieldbench_project.middleware', level='ERROR'):
            response = self.client.get(reverse('experiments:run_shield', kwargs={'run_id': run.id}))
        self.assertEqual(response.status_code, status.HTTP_400_BAD_REQUEST)
        self.assertEqual(response.json()['error'], 'Invalid input')

    def test_health_and_root(self):
        self.assertEqual(self.client.get(reverse('health_check')).data, {'status': 'healthy'})
        self.assertIn('runs', self.client.get(reverse('api_root')).data['endpoints'])

    def test_stored_rows_match_metrics(self):
        self.assertEqual(EpisodeMetric.objects.count(), 6)
        self.assertEqual(StoredShield.objects.count(), 2)
        shield = StoredShield.objects.first().load()
        self.assertEqual(len(shield), StoredShield.objects.first().entry_count)


def count_where(artifacts, predicate):
    return sum(1 for artifact in artifacts if predicate(artifact))


@tag('slow')
class DirectionalExperimentTestCase(SimpleTestCase):
    """Expériences longues à l'échelle « bureau » (exclues avec --exclude-tag slow)"""

    SEEDS = '0,1,2,3,4'

    def test_tabular_shields_never_repeat_in_any_protocol(self):
        configs = [
            validate_config({'protocol': 'single', 'seeds': self.SEEDS, 'episodes': 500}),
            validate_config({'protocol': 'multi', 'shield_mode': 'shared', 'agent_count': 3,
                             'seeds': self.SEEDS, 'episodes': 500}),
            validate_config({'protocol': 'multi', 'shield_mode': 'individual', 'agent_count': 3,
                             'seeds': self.SEEDS, 'episodes': 500}),
            validate_config({'protocol': 'goal', 'seeds': self.SEEDS, 'episodes': 500, 'eval_every': 0}),
        ]
        for config in configs:
            artifacts = run_experiment(config)
            for artifact in artifacts:
                self.assertEqual(artifact.repeated_mistakes, 0, (config.protocol, config.shield_mode, artifact.seed))

    def test_plain_ppo_repeats_on_adversarial_layout(self):
        config = validate_config({'protocol': 'single', 'algorithm': 'ppo', 'layout': 'adversarial',
                                  'seeds': self.SEEDS, 'episodes': 200})
        artifacts = run_experiment(config)
        self.assertGreaterEqual(count_where(artifacts, lambda a: a.repeated_mistakes > 0), 4)

    def test_shieldppo_outperforms_ppo(self):
        common = {'protocol': 'single', 'layout': 'adversarial', 'seeds': self.SEEDS, 'episodes': 400}
        shielded = run_experiment(validate_config(dict(common, algorithm='shieldppo')))
        plain = run_experiment(validate_config(dict(common, algorithm='ppo')))
        wins = sum(
            1 for ours, theirs in zip(shielded, plain)
            if ours.summary()['final_quartile_return'] > theirs.summary()['final_quartile_return']
        )
        self.assertGreaterEqual(wins, 4)

    def test_shieldppo_mistake_rate_does_not_increase(self):
        config = validate_config({'protocol': 'single', 'layout': 'desk', 'instance_pool': 8,
                                  'seeds': self.SEEDS, 'episodes': 500})
        for artifact in run_experiment(config):
            quartiles = windowed_mistake_rates(artifact.rows, 4)
            self.assertNotEqual(mann_kendall(quartiles).trend, 'increasing', artifact.seed)
            windows = windowed_mistake_rates(artifact.rows, config.trend_windows)
            self.assertNotEqual(mann_kendall(windows).trend, 'increasing', artifact.seed)

    def test_shared_shield_group_ordering(self):
        totals, reached = {}, {}
        for mode in ('shared', 'individual', 'none'):
            config = validate_config({'protocol': 'multi', 'shield_mode': mode, 'agent_count': 10,
                                      'layout': 'desk', 'seeds': self.SEEDS, 'episodes': 300})
            artifacts = run_experiment(config)
            totals[mode] = [artifact.total_mistakes for artifact in artifacts]
            reached[mode] = [artifact.summary()['episodes_to_threshold'] for artifact in artifacts]
        ordered = sum(
            1 for shared, individual, none in zip(totals['shared'], totals['individual'], totals['none'])
            if shared <= individual <= none
        )
        self.assertGreaterEqual(ordered, 4)

        # seuil jamais atteint : infini
        def episodes(value):
            return math.inf if value is None else value

        faster = sum(
            1 for shared, individual in zip(reached['shared'], reached['individual'])
            if episodes(shared) < episodes(individual)
        )
        self.assertGreaterEqual(faster, 4, reached)

    def test_goal_conditioned_reachability(self):
        config = validate_config({'protocol': 'goal', 'seeds': self.SEEDS, 'episodes': 1500,
                                  'learning_rate': 1e-3, 'segment': 512, 'eval_every': 20,
                                  'eval_episodes': 3})
        reached = 0
        for artifact in run_experiment(config):
            steps = steps_to_greedy_success(artifact.evaluation_rows, 0.9)
            if steps is not None and steps <= 50_000:
                reached += 1
        self.assertGreaterEqual(reached, 4)
