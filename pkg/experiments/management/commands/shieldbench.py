import json
import logging
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError, CommandParser

from agents.exceptions import AgentError
from lavagrid.exceptions import LavaGridError
from pomdp.exceptions import PomdpError
from shields.exceptions import ShieldError
from shields.services import describe_shield, merge_shields, read_shield, write_shield
from experiments.exceptions import ConfigError, ExperimentError
from experiments.services import (
    load_config, persist_artifact, run_experiment, write_experiment_outputs, write_plot,
)

logger = logging.getLogger(__name__)

USAGE_ERROR = 2
RUNTIME_ERROR = 1
RUNTIME_ERRORS = (PomdpError, ShieldError, LavaGridError, AgentError, ExperimentError, OSError)


class UsageParser(CommandParser):
    """Sous-commande : toute erreur d'arguments sort avec le code 2"""

    def error(self, message):
        if self.called_from_command_line:
            super().error(message)
        raise CommandError(f"Error: {message}", returncode=USAGE_ERROR)


class Command(BaseCommand):
    help = (
        "Shieldbench : lance des expériences (run), valide une configuration (validate), "
        "inspecte ou fusionne des boucliers (shield-inspect, shield-merge), trace des résultats (plot)"
    )

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        # les arguments inconnus remontent au parseur principal
        parser.__class__ = UsageParser
        return parser

    def add_arguments(self, parser):
        from_cli = getattr(parser, 'called_from_command_line', None)
        verbs = parser.add_subparsers(dest='verb', metavar='VERB', parser_class=UsageParser)
        verbs.required = True

        run = verbs.add_parser('run', help="Run every seed of a config", called_from_command_line=from_cli)
        self._config_arguments(run)
        run.add_argument('--out', type=Path, help="Output directory (default SHIELDBENCH_OUTPUT_DIR)")
        run.add_argument('--persist', action='store_true', help="Also store the runs in the database")
        run.add_argument('--sequential', action='store_true', help="Single worker for PPO updates")

        validate = verbs.add_parser('validate', help="Validate a config without running it",
                                    called_from_command_line=from_cli)
        self._config_arguments(validate)

        inspect = verbs.add_parser('shield-inspect', help="Summarize shield files", called_from_command_line=from_cli)
        inspect.add_argument('paths', nargs='+', type=Path)
        inspect.add_argument('--limit', type=int, default=20, help="Entries decoded per tabular shield")
        inspect.add_argument('--json', action='store_true', help="Print the summaries as JSON")
        inspect.add_argument('--quiet', action='store_true')

        merge = verbs.add_parser('shield-merge', help="Union of tabular shield files", called_from_command_line=from_cli)
        merge.add_argument('paths', nargs='+', type=Path)
        merge.add_argument('--out', type=Path, required=True)
        merge.add_argument('--quiet', action='store_true')

        plot = verbs.add_parser('plot', help="Two-panel SVG from aggregate CSVs", called_from_command_line=from_cli)
        plot.add_argument('paths', nargs='+', type=Path)
        plot.add_argument('--out', type=Path, required=True)
        plot.add_argument('--quiet', action='store_true')

    def _config_arguments(self, parser):
        parser.add_argument('--config', type=Path, required=True, help="Experiment config file")
        parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                            help="Override a config key (repeatable, section.key accepted)")
        parser.add_argument('--quiet', action='store_true', help="Console log level WARNING")

    def handle(self, *args, **options):
        verb = options['verb']
        handler = {
            'run': self.handle_run,
            'validate': self.handle_validate,
            'shield-inspect': self.handle_shield_inspect,
            'shield-merge': self.handle_shield_merge,
            'plot': self.handle_plot,
        }[verb]

        console_handlers = self._quiet_console() if options.get('quiet') else []
        try:
            handler(options)
        except ConfigError as exc:
            raise CommandError(f"Invalid configuration: {exc}", returncode=USAGE_ERROR)
        except RUNTIME_ERRORS as exc:
            logger.error(f"shieldbench {verb} failed: {exc}")
            dump = getattr(exc, 'dump', None)
            if dump:
                logger.error(f"Diagnostic dump: {json.dumps(dump, sort_keys=True)}")
            raise CommandError(f"{type(exc).__name__}: {exc}", returncode=RUNTIME_ERROR)
        finally:
            for handler_, level in console_handlers:
                handler_.setLevel(level)

    def _quiet_console(self):
        """Abaisse les handlers console à WARNING ; retourne de quoi les restaurer"""
        changed = []
        loggers = [logging.getLogger()] + [
            logging.getLogger(name) for name in ('django', 'pomdp', 'shields', 'lavagrid', 'agents', 'experiments')
        ]
        for logger_ in loggers:
            for handler in logger_.handlers:
                if type(handler) is logging.StreamHandler and handler.level < logging.WARNING:
                    changed.append((handler, handler.level))
                    handler.setLevel(logging.WARNING)
        return changed

    def _load(self, options):
        return load_config(options['config'], options['overrides'], settings.SHIELDBENCH_SEED_OFFSET)

    def handle_validate(self, options):
        config = self._load(options)
        self.stdout.write(self.style.SUCCESS(
            f"OK: {config.name} ({config.protocol}, {len(config.seeds)} seed(s), "
            f"{config.episodes} episodes, digest {config.digest()[:12]})"
        ))

    def handle_run(self, options):
        config = self._load(options)
        out_dir = options['out'] or settings.SHIELDBENCH_OUTPUT_DIR
        artifacts = run_experiment(config, max_workers=1 if options['sequential'] else None)
        summary, paths = write_experiment_outputs(artifacts, out_dir)

        if options['persist']:
            for artifact in artifacts:
                run = persist_artifact(artifact)
                self.stdout.write(f"Stored seed {artifact.seed} as run {run.id}")

        self.stdout.write(self._summary_table(summary))
        self.stdout.write(self.style.SUCCESS(
            f"{len(artifacts)} run(s) written to {Path(out_dir) / config.name} ({len(paths)} files)"
        ))

    def _summary_table(self, summary) -> str:
        header = f"{'seed':>8} {'episodes':>8} {'steps':>9} {'mistakes':>8} {'repeated':>8} {'final return':>13} {'to threshold':>12}"
        lines = [f"{summary['name']} [{summary['protocol']}]", header, '-' * len(header)]
        for run in summary['runs']:
            final = run['final_quartile_return']
            reached = run['episodes_to_threshold']
            lines.append(
                f"{run['seed']:>8} {run['episodes']:>8} {run['total_steps']:>9} {run['total_mistakes']:>8} "
                f"{run['repeated_mistakes']:>8} {final if final is None else format(final, '.2f'):>13} "
                f"{'-' if reached is None else reached:>12}"
            )
        totals = summary['totals']
        lines.append('-' * len(header))
        lines.append(
            f"total: {totals['steps']} steps, {totals['mistakes']} mistakes "
            f"({totals['repeated_mistakes']} repeated), mistake rate {totals['mistake_rate']:.3g}"
        )
        if summary['degenerate']:
            lines.append("warning: single seed, standard errors reported as 0")
        return '\n'.join(lines)

    def handle_shield_inspect(self, options):
        summaries = []
        for path in options['paths']:
            summary = describe_shield(read_shield(path), limit=options['limit'])
            summary['path'] = str(path)
            summaries.append(summary)

        if options['json']:
            self.stdout.write(json.dumps(summaries, indent=2, sort_keys=True))
            return
        for summary in summaries:
            self.stdout.write(self.style.SUCCESS(f"{summary['path']}: {summary['variant']} shield, {summary['entries']} entries"))
            for key in ('capacity', 'm', 'k', 'n', 'expected_fp_rate', 'feature_size', 'threshold'):
                if key in summary:
                    self.stdout.write(f"  {key}: {summary[key]}")
            for entry in summary.get('keys', []):
                self.stdout.write('  ' + ' '.join(f"{name}={value}" for name, value in entry.items()))

    def handle_shield_merge(self, options):
        if len(options['paths']) < 2:
            raise CommandError("Error: shield-merge needs at least two shield files", returncode=USAGE_ERROR)
        merged = merge_shields([read_shield(path) for path in options['paths']])
        write_shield(merged, options['out'])
        self.stdout.write(self.style.SUCCESS(
            f"Merged {len(options['paths'])} shields into {options['out']} ({len(merged)} entries)"
        ))

    def handle_plot(self, options):
        out = write_plot(options['paths'], options['out'])
        self.stdout.write(self.style.SUCCESS(f"Plot written to {out}"))
