"""
Harnais d'expériences
Lecture et validation des configurations, exécution des trois protocoles
(agent unique, multi-agents, conditionné par le but), métriques par épisode,
agrégation entre graines, écriture des résultats (CSV, JSON, SVG) et
archivage optionnel en base.
"""
import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np
from django.conf import settings
from django.db import transaction

from agents.services import (
    MistakeEntry, MistakeLedger, PolicyNetwork, PPOAgent, PPOConfig, save_checkpoint, write_mistake_log,
)
from lavagrid.services import LavaGridEnvironment, build_layout
from pomdp.services import UNSAFE, normalize_seed
from shields.services import (
    ParametricShield, SafeExperienceReservoir, Shield, ShieldKey, build_shield, train_parametric, write_shield,
)
from .exceptions import AggregationError, ConfigError, ExperimentError
from .serializers import ExperimentConfigSerializer

logger = logging.getLogger(__name__)

# ============================================================
# Configuration
# ============================================================

CONFIG_SECTIONS = {
    'experiment': ('name', 'protocol', 'seeds', 'episodes', 'agent_count', 'shield_mode', 'algorithm'),
    'environment': ('layout', 'lava_growth', 'lava_p_cap', 'tile_probability', 'instance_pool',
                    'max_steps_per_episode', 'shaping_sign'),
    'agent': ('gamma', 'lam', 'clip', 'learning_rate', 'epochs', 'minibatch', 'entropy_coef',
              'value_coef', 'segment', 'hidden', 'max_grad_norm', 'default_policy'),
    'shield': ('shield_variant', 'shield_capacity', 'bloom_expected_n', 'bloom_target_fp',
               'parametric_probe', 'probe_epochs', 'probe_reservoir'),
    'evaluation': ('eval_every', 'eval_episodes', 'success_threshold', 'success_window', 'trend_windows'),
    'output': ('save_checkpoints', 'save_mistake_log', 'save_shields'),
}
KEY_SECTIONS = {key: section for section, keys in CONFIG_SECTIONS.items() for key in keys}
LIST_KEYS = ('seeds', 'default_policy')
DIGEST_EXCLUDED = ('seeds', 'seed_offset')


@dataclass(frozen=True)
class ExperimentConfig:
    """Configuration validée d'une expérience (toutes les valeurs par défaut résolues)"""

    protocol: str
    name: str = 'experiment'
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    episodes: int = 500
    agent_count: int = 1
    shield_mode: str = 'individual'
    algorithm: str = 'shieldppo'
    layout: str = 'desk'
    lava_growth: float = 1.2
    lava_p_cap: float = 0.5
    tile_probability: Optional[float] = None
    instance_pool: int = 0
    max_steps_per_episode: int = 0
    shaping_sign: float = -1.0
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    learning_rate: float = 3e-4
    epochs: int = 4
    minibatch: int = 64
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    segment: int = 2048
    hidden: int = 64
    max_grad_norm: float = 0.5
    default_policy: Optional[Tuple[float, ...]] = None
    shield_variant: str = 'tabular'
    shield_capacity: int = 1024
    bloom_expected_n: int = 10_000
    bloom_target_fp: float = 0.01
    parametric_probe: bool = False
    probe_epochs: int = 200
    probe_reservoir: int = 2000
    eval_every: int = 0
    eval_episodes: int = 5
    success_threshold: float = 0.9
    success_window: int = 20
    trend_windows: int = 10
    save_checkpoints: bool = False
    save_mistake_log: bool = True
    save_shields: bool = True
    seed_offset: int = 0

    @classmethod
    def from_validated(cls, data: Dict, seed_offset: int = 0) -> 'ExperimentConfig':
        values = {f.name: data[f.name] for f in fields(cls) if f.name in data}
        values['seeds'] = tuple(int(seed) for seed in values.get('seeds', cls.seeds))
        if values.get('default_policy') is not None:
            values['default_policy'] = tuple(float(p) for p in values['default_policy'])
        values['seed_offset'] = int(seed_offset)
        return cls(**values)

    @property
    def run_seeds(self) -> List[int]:
        return [seed + self.seed_offset for seed in self.seeds]

    @property
    def shielded(self) -> bool:
        return self.shield_mode != 'none'

    def snapshot(self) -> Dict:
        data = asdict(self)
        data['seeds'] = list(self.seeds)
        if self.default_policy is not None:
            data['default_policy'] = list(self.default_policy)
        return data

    def digest(self) -> str:
        """SHA-256 de la configuration hors graines : identifie les runs agrégeables"""
        payload = {k: v for k, v in self.snapshot().items() if k not in DIGEST_EXCLUDED}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode('utf-8')).hexdigest()

    def ppo_config(self) -> PPOConfig:
        return PPOConfig(
            gamma=self.gamma, lam=self.lam, clip=self.clip, learning_rate=self.learning_rate,
            epochs=self.epochs, minibatch=self.minibatch, entropy_coef=self.entropy_coef,
            value_coef=self.value_coef, segment=self.segment, hidden=self.hidden,
            max_grad_norm=self.max_grad_norm,
        )


def parse_config_text(text: str) -> Tuple[Dict[str, str], Dict[str, int]]:
    """
    Lit le format ``[section]`` + ``clé = valeur``

    Lignes vides et commentaires (# ou ;) ignorés. Chaque clé appartient à
    une section précise et ne peut apparaître qu'une fois.

    Returns:
        (valeurs brutes, numéro de ligne de chaque clé)
    """
    values, lines = {}, {}
    section = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(('#', ';')):
            continue
        if line.startswith('['):
            if not line.endswith(']'):
                raise ConfigError(f"malformed section header {line!r}", number)
            section = line[1:-1].strip()
            if section not in CONFIG_SECTIONS:
                raise ConfigError(
                    f"unknown section [{section}] (expected one of {', '.join(CONFIG_SECTIONS)})", number
                )
            continue
        if '=' not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", number)
        if section is None:
            raise ConfigError("key outside of any [section]", number)

        key, value = (part.strip() for part in line.split('=', 1))
        if key not in KEY_SECTIONS:
            raise ConfigError(f"unknown key '{key}'", number)
        if KEY_SECTIONS[key] != section:
            raise ConfigError(f"key '{key}' belongs to section [{KEY_SECTIONS[key]}], not [{section}]", number)
        if key in values:
            raise ConfigError(f"duplicate key '{key}' (first set on line {lines[key]})", number)
        values[key] = value
        lines[key] = number
    return values, lines


def apply_overrides(values: Dict[str, str], lines: Dict[str, int], overrides: Iterable[str]) -> None:
    """Applique les ``--set clé=valeur`` (ou ``section.clé=valeur``) sur place"""
    for override in overrides:
        if '=' not in override:
            raise ConfigError(f"--set expects key=value, got {override!r}")
        key, value = (part.strip() for part in override.split('=', 1))
        if '.' in key:
            section, key = key.split('.', 1)
            if KEY_SECTIONS.get(key) != section:
                raise ConfigError(f"--set {section}.{key}: no such key in section [{section}]")
        if key not in KEY_SECTIONS:
            raise ConfigError(f"--set {key}: unknown key")
        values[key] = value
        lines.pop(key, None)


def _first_message(detail) -> str:
    if isinstance(detail, dict):
        return _first_message(next(iter(detail.values())))
    if isinstance(detail, (list, tuple)):
        return _first_message(detail[0])
    return str(detail)


def validate_config(values: Dict, lines: Optional[Dict[str, int]] = None, seed_offset: int = 0) -> ExperimentConfig:
    """
    Valide des valeurs (brutes ou typées) avec ExperimentConfigSerializer

    Raises:
        ConfigError: première erreur, avec sa ligne quand elle vient du fichier
    """
    lines = lines or {}
    data = dict(values)
    for key in LIST_KEYS:
        if isinstance(data.get(key), str):
            data[key] = [item.strip() for item in data[key].split(',') if item.strip()]

    serializer = ExperimentConfigSerializer(data=data)
    if not serializer.is_valid():
        errors = serializer.errors
        ranked = sorted(errors, key=lambda name: (lines.get(name) is None, lines.get(name, 0)))
        name = ranked[0]
        message = _first_message(errors[name])
        label = 'config' if name == 'non_field_errors' else name
        raise ConfigError(f"{label}: {message}", lines.get(name))
    return ExperimentConfig.from_validated(serializer.validated_data, seed_offset)


def load_config(path, overrides: Sequence[str] = (), seed_offset: int = 0) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}")

    values, lines = parse_config_text(text)
    apply_overrides(values, lines, overrides)
    config = validate_config(values, lines, seed_offset)
    logger.debug(f"Loaded config '{config.name}' from {path} (digest {config.digest()[:12]})")
    return config


# ============================================================
# Métriques et artefacts
# ============================================================

METRICS_HEADER = (
    'run_seed', 'episode', 'mean_return', 'mistake_count', 'step_count',
    'mistake_rate', 'repeated_mistake_count', 'goal_count',
)
EVALUATION_HEADER = ('run_seed', 'episode', 'env_steps', 'goal_index', 'success_rate')
AGGREGATE_HEADER = (
    'episode', 'runs', 'mean_return_mean', 'mean_return_se', 'mistake_rate_mean',
    'mistake_rate_se', 'mistake_count_mean', 'repeated_mistake_total',
)


def format_value(value) -> str:
    """Flottants sur 17 chiffres significatifs, le reste tel quel"""
    if isinstance(value, (float, np.floating)):
        return format(float(value), '.17g')
    if value is None:
        return ''
    return str(value)


@dataclass(frozen=True)
class MetricsRow:
    run_seed: int
    episode: int
    mean_return: float
    mistake_count: int
    step_count: int
    mistake_rate: float
    repeated_mistake_count: int
    goal_count: int = 0

    def values(self) -> Tuple:
        return tuple(getattr(self, name) for name in METRICS_HEADER)


@dataclass(frozen=True)
class EvaluationRow:
    run_seed: int
    episode: int
    env_steps: int
    goal_index: int
    success_rate: float

    def values(self) -> Tuple:
        return tuple(getattr(self, name) for name in EVALUATION_HEADER)


@dataclass(frozen=True)
class AggregateRow:
    episode: int
    runs: int
    mean_return_mean: float
    mean_return_se: float
    mistake_rate_mean: float
    mistake_rate_se: float
    mistake_count_mean: float
    repeated_mistake_total: int

    def values(self) -> Tuple:
        return tuple(getattr(self, name) for name in AGGREGATE_HEADER)


@dataclass
class RunArtifact:
    """Résultat complet d'un run (une configuration, une graine)"""

    config: Dict
    digest: str
    seed: int
    rows: List[MetricsRow]
    evaluation_rows: List[EvaluationRow] = field(default_factory=list)
    agent_returns: List[Tuple[float, ...]] = field(default_factory=list)
    shields: Dict[str, Shield] = field(default_factory=dict)
    mistake_log: List[MistakeEntry] = field(default_factory=list)
    networks: List[PolicyNetwork] = field(default_factory=list)
    wall_clock: float = 0.0
    probe: Optional[ParametricShield] = None
    probe_stats: Dict = field(default_factory=dict)

    @property
    def protocol(self) -> str:
        return self.config['protocol']

    @property
    def total_steps(self) -> int:
        return sum(row.step_count for row in self.rows)

    @property
    def total_mistakes(self) -> int:
        return sum(row.mistake_count for row in self.rows)

    @property
    def repeated_mistakes(self) -> int:
        return sum(row.repeated_mistake_count for row in self.rows)

    def summary(self) -> Dict:
        """Statistiques d'un run pour le résumé JSON et la table de la CLI"""
        windows = windowed_mistake_rates(self.rows, self.config['trend_windows'])
        trend = mann_kendall(windows)
        summary = {
            'seed': self.seed,
            'episodes': len(self.rows),
            'total_steps': self.total_steps,
            'total_mistakes': self.total_mistakes,
            'repeated_mistakes': self.repeated_mistakes,
            'final_mistake_rate': self.rows[-1].mistake_rate if self.rows else 0.0,
            'final_quartile_return': final_quartile_return(self.rows),
            'quartile_mistake_rates': windowed_mistake_rates(self.rows, 4),
            'mistake_trend': asdict(trend),
            'episodes_to_threshold': episodes_to_threshold(
                self.rows, self.config['agent_count'],
                self.config['success_threshold'], self.config['success_window'],
            ),
            'shields': {name: len(shield) for name, shield in sorted(self.shields.items())},
            'wall_clock_seconds': self.wall_clock,
        }
        if self.evaluation_rows:
            summary['greedy_success_steps'] = steps_to_greedy_success(
                self.evaluation_rows, self.config['success_threshold'],
            )
        if self.probe_stats:
            summary['parametric_probe'] = self.probe_stats
        return summary


def final_quartile_return(rows: Sequence[MetricsRow]) -> Optional[float]:
    if not rows:
        return None
    tail = rows[len(rows) - max(1, len(rows) // 4):]
    return math.fsum(row.mean_return for row in tail) / len(tail)


def windowed_mistake_rates(rows: Sequence[MetricsRow], windows: int) -> List[float]:
    """Taux d'erreur (erreurs / pas) de chaque fenêtre contiguë d'épisodes"""
    rates = []
    for chunk in np.array_split(np.arange(len(rows)), windows):
        if not len(chunk):
            continue
        steps = sum(rows[i].step_count for i in chunk)
        mistakes = sum(rows[i].mistake_count for i in chunk)
        rates.append(mistakes / steps if steps else 0.0)
    return rates


@dataclass(frozen=True)
class MannKendallResult:
    s: int
    z: float
    p_value: float
    trend: str


def mann_kendall(values: Sequence[float], alpha: float = 0.05) -> MannKendallResult:
    """Test de tendance de Mann-Kendall (approximation normale, correction des ex aequo)"""
    values = list(values)
    n = len(values)
    s = 0
    for i in range(n - 1):
        for j in range(i + 1, n):
            s += int(np.sign(values[j] - values[i]))

    _, counts = np.unique(np.asarray(values, dtype=np.float64), return_counts=True)
    ties = sum(int(t) * (int(t) - 1) * (2 * int(t) + 5) for t in counts)
    variance = (n * (n - 1) * (2 * n + 5) - ties) / 18.0
    if variance <= 0.0 or s == 0:
        z = 0.0
    else:
        z = (s - 1) / math.sqrt(variance) if s > 0 else (s + 1) / math.sqrt(variance)
    p_value = math.erfc(abs(z) / math.sqrt(2.0))

    if p_value < alpha:
        trend = 'increasing' if z > 0 else 'decreasing'
    else:
        trend = 'no trend'
    return MannKendallResult(s, z, p_value, trend)


def episodes_to_threshold(rows: Sequence[MetricsRow], agent_count: int, threshold: float,
                          window: int) -> Optional[int]:
    """Premier épisode (compté à partir de 1) où le taux de buts glissant atteint le seuil"""
    rates = [row.goal_count / agent_count for row in rows]
    for end in range(window, len(rates) + 1):
        if math.fsum(rates[end - window:end]) / window >= threshold:
            return end
    return None


def steps_to_greedy_success(evaluation_rows: Sequence[EvaluationRow], threshold: float) -> Optional[int]:
    """Pas d'entraînement au premier point d'évaluation où chaque but atteint le seuil"""
    by_episode: Dict[int, List[EvaluationRow]] = {}
    for row in evaluation_rows:
        by_episode.setdefault(row.episode, []).append(row)
    for episode in sorted(by_episode):
        rows = by_episode[episode]
        if all(row.success_rate >= threshold for row in rows):
            return rows[0].env_steps
    return None


# ============================================================
# Exécution des protocoles
# ============================================================

class TrainingRun:
    """
    Un run d'entraînement : agent_count agents, chacun avec son environnement
    et ses flux aléatoires dérivés de (graine, indice d'agent).

    Les agents jouent à tour de rôle, un pas chacun par tick, dans l'ordre de
    leur indice ; le bouclier partagé est le seul objet mutable commun. Les
    mises à jour PPO, indépendantes, passent par un pool de threads.
    """

    def __init__(self, config: ExperimentConfig, seed: int, max_workers: Optional[int] = None):
        self.config = config
        self.seed = int(seed)
        self.max_workers = max_workers
        self.layout = build_layout(config.layout, config.lava_growth, config.lava_p_cap, config.tile_probability)
        goal_conditioned = config.protocol == 'goal'
        max_steps = config.max_steps_per_episode or None
        ppo_config = config.ppo_config()

        self.shields: Dict[str, Shield] = {}
        shared_shield, shared_ledger = None, None
        if config.shield_mode == 'shared':
            shared_shield = self._new_shield()
            shared_ledger = MistakeLedger()
            self.shields['shared'] = shared_shield

        self.agents: List[PPOAgent] = []
        self.envs: List[LavaGridEnvironment] = []
        self.eval_envs: List[LavaGridEnvironment] = []
        self.episode_rngs: List[np.random.Generator] = []
        self.eval_rngs: List[np.random.Generator] = []
        for index in range(config.agent_count):
            # les trois premiers flux ne dépendent pas du nombre de fils
            env_stream, agent_stream, eval_stream, pool_stream = np.random.SeedSequence(
                [normalize_seed(self.seed), index]
            ).spawn(4)
            env_kwargs = dict(
                discount=config.gamma, shaping_sign=config.shaping_sign, max_steps=max_steps,
                goal_conditioned=goal_conditioned, instance_pool=config.instance_pool,
                pool_seed=int(pool_stream.generate_state(1, np.uint64)[0]),
            )
            env = LavaGridEnvironment(self.layout, **env_kwargs)

            if config.shield_mode == 'shared':
                shield, ledger = shared_shield, shared_ledger
            elif config.shield_mode == 'individual':
                shield, ledger = self._new_shield(), MistakeLedger()
                self.shields[f'agent-{index}'] = shield
            else:
                shield, ledger = None, MistakeLedger()

            self.agents.append(PPOAgent(
                env.spec, ppo_config, np.random.default_rng(agent_stream), shield,
                config.default_policy, agent_id=index, ledger=ledger,
            ))
            self.envs.append(env)
            self.episode_rngs.append(np.random.default_rng(env_stream))
            self.eval_rngs.append(np.random.default_rng(eval_stream))
            if config.eval_every:
                self.eval_envs.append(LavaGridEnvironment(self.layout, **env_kwargs))

        self.reservoir = None
        if config.parametric_probe:
            probe_stream = np.random.SeedSequence([normalize_seed(self.seed), config.agent_count])
            self.reservoir = SafeExperienceReservoir(config.probe_reservoir, np.random.default_rng(probe_stream))

        self.rows: List[MetricsRow] = []
        self.evaluation_rows: List[EvaluationRow] = []
        self.agent_returns: List[Tuple[float, ...]] = []
        self.total_steps = 0
        self.total_mistakes = 0

    def _new_shield(self) -> Shield:
        config = self.config
        return build_shield(config.shield_variant, config.shield_capacity,
                            config.bloom_expected_n, config.bloom_target_fp)

    def _worker_count(self) -> int:
        workers = self.max_workers
        if workers is None:
            workers = getattr(settings, 'SHIELDBENCH_MAX_WORKERS', 0)
        if workers <= 0:
            workers = len(self.agents)
        return max(1, min(workers, len(self.agents)))

    def run(self) -> RunArtifact:
        config = self.config
        digest = config.digest()
        started = time.perf_counter()
        logger.info(
            f"Run '{config.name}' seed {self.seed}: {config.protocol} protocol, {config.agent_count} agent(s), "
            f"shield {config.shield_mode}, {config.episodes} episodes (digest {digest[:12]})"
        )

        workers = self._worker_count()
        executor = ThreadPoolExecutor(max_workers=workers, thread_name_prefix='ppo-update') if workers > 1 else None
        try:
            for episode in range(config.episodes):
                self._play_episode(episode)
                self._update_agents(executor)
                if config.eval_every and (episode + 1) % config.eval_every == 0:
                    self._evaluate(episode + 1)
        finally:
            if executor is not None:
                executor.shutdown(wait=True)

        mistake_log = sorted(
            (entry for agent in self.agents for entry in agent.mistake_log),
            key=lambda entry: (entry.episode, entry.step, entry.agent),
        )
        artifact = RunArtifact(
            config=config.snapshot(),
            digest=digest,
            seed=self.seed,
            rows=self.rows,
            evaluation_rows=self.evaluation_rows,
            agent_returns=self.agent_returns,
            shields=dict(self.shields),
            mistake_log=mistake_log,
            networks=[agent.network for agent in self.agents],
        )
        if self.reservoir is not None:
            self._train_probe(artifact)
        artifact.wall_clock = time.perf_counter() - started
        logger.info(
            f"Run '{config.name}' seed {self.seed} done in {artifact.wall_clock:.1f}s: "
            f"{artifact.total_mistakes} mistakes ({artifact.repeated_mistakes} repeated) in {artifact.total_steps} steps"
        )
        return artifact

    def _play_episode(self, episode: int) -> None:
        count = len(self.agents)
        observations = [
            env.reset(seed=int(rng.integers(0, 2 ** 63)))
            for env, rng in zip(self.envs, self.episode_rngs)
        ]
        returns = [0.0] * count
        mistakes = repeats = steps = goals = 0

        active = list(range(count))
        while active:
            still_active = []
            for index in active:
                agent, env = self.agents[index], self.envs[index]
                decision = agent.decide(observations[index], env.state_key())
                transition = env.step(decision.action)
                if agent.record_mistakes(transition, episode, env.steps_taken - 1):
                    repeats += 1
                if transition.is_mistake:
                    mistakes += 1
                elif self.reservoir is not None:
                    self.reservoir.add(ShieldKey(transition.state_key, transition.action))
                agent.store(decision, transition)

                returns[index] += transition.reward
                steps += 1
                observations[index] = transition.next_obs
                if transition.episode_over:
                    goals += int(transition.reached_goal)
                else:
                    still_active.append(index)
            active = still_active

        self.total_steps += steps
        self.total_mistakes += mistakes
        self.agent_returns.append(tuple(returns))
        self.rows.append(MetricsRow(
            run_seed=self.seed,
            episode=episode,
            mean_return=math.fsum(returns) / count,
            mistake_count=mistakes,
            step_count=steps,
            mistake_rate=self.total_mistakes / self.total_steps if self.total_steps else 0.0,
            repeated_mistake_count=repeats,
            goal_count=goals,
        ))

    def _update_agents(self, executor: Optional[ThreadPoolExecutor]) -> None:
        ready = [agent for agent in self.agents if agent.ready()]
        if not ready:
            return
        if executor is None or len(ready) == 1:
            results = [agent.update() for agent in ready]
        else:
            results = list(executor.map(lambda agent: agent.update(), ready))
        aborted = sum(1 for stats in results if stats.get('aborted'))
        if aborted:
            logger.warning(f"Seed {self.seed}: {aborted} PPO update(s) aborted on non-finite values")

    def _evaluate(self, episode: int) -> None:
        """Épisodes gloutons avec bouclier, sans apprentissage ni enregistrement"""
        for goal in range(len(self.layout.goals)):
            successes = total = 0
            for agent, env, rng in zip(self.agents, self.eval_envs, self.eval_rngs):
                for _ in range(self.config.eval_episodes):
                    obs = env.reset(seed=int(rng.integers(0, 2 ** 63)), goal_index=goal)
                    reached = False
                    while not env.done:
                        action, _ = agent.sample_action(obs, env.state_key(), greedy=True)
                        transition = env.step(action)
                        obs = transition.next_obs
                        reached = transition.reached_goal
                    successes += int(reached)
                    total += 1
            self.evaluation_rows.append(EvaluationRow(self.seed, episode, self.total_steps, goal, successes / total))
        logger.debug(
            f"Seed {self.seed} evaluation after {episode} episodes: "
            + ', '.join(f"goal {row.goal_index} {row.success_rate:.2f}" for row in self.evaluation_rows[-len(self.layout.goals):])
        )

    def _train_probe(self, artifact: RunArtifact) -> None:
        positives = sorted({entry.key for entry in artifact.mistake_log})
        if not positives:
            logger.info(f"Seed {self.seed}: no mistakes recorded, parametric probe skipped")
            return
        unsafe = set(positives)
        negatives = sorted(set(self.reservoir.keys) - unsafe)
        probe = train_parametric(positives, negatives, epochs=self.config.probe_epochs,
                                 action_count=self.envs[0].spec.action_count)
        recall = sum(probe.query(key) == UNSAFE for key in positives) / len(positives)
        specificity = (
            sum(probe.query(key) != UNSAFE for key in negatives) / len(negatives) if negatives else None
        )
        artifact.probe = probe
        artifact.probe_stats = {
            'positives': len(positives),
            'negatives': len(negatives),
            'recall': recall,
            'specificity': specificity,
            'final_loss': probe.loss_history[-1],
        }


def _run_protocol(config: ExperimentConfig, seed: int, protocol: str, max_workers: Optional[int]) -> RunArtifact:
    if config.protocol != protocol:
        raise ConfigError(f"protocol '{config.protocol}' cannot be run as '{protocol}'")
    return TrainingRun(config, seed, max_workers).run()


def run_single(config: ExperimentConfig, seed: int, max_workers: Optional[int] = None) -> RunArtifact:
    """Un agent (PPO ou ShieldPPO), une instance fraîche par épisode"""
    return _run_protocol(config, seed, 'single', max_workers)


def run_multi(config: ExperimentConfig, seed: int, max_workers: Optional[int] = None) -> RunArtifact:
    """agent_count apprenants ; bouclier absent, individuel ou partagé selon shield_mode"""
    return _run_protocol(config, seed, 'multi', max_workers)


def run_goal_conditioned(config: ExperimentConfig, seed: int, max_workers: Optional[int] = None) -> RunArtifact:
    """Un but tiré par épisode, une politique conditionnée par l'écart au but"""
    return _run_protocol(config, seed, 'goal', max_workers)


PROTOCOL_RUNNERS = {
    'single': run_single,
    'multi': run_multi,
    'goal': run_goal_conditioned,
}


def run_experiment(config: ExperimentConfig, max_workers: Optional[int] = None) -> List[RunArtifact]:
    """Un run par graine (décalage SHIELDBENCH_SEED_OFFSET inclus)"""
    runner = PROTOCOL_RUNNERS[config.protocol]
    return [runner(config, seed, max_workers) for seed in config.run_seeds]


# ============================================================
# Agrégation
# ============================================================

@dataclass
class AggregateTable:
    digest: str
    seeds: List[int]
    rows: List[AggregateRow]
    degenerate: bool = False


def _mean_and_se(values: Sequence[float]) -> Tuple[float, float]:
    n = len(values)
    mean = math.fsum(values) / n
    if n < 2:
        return mean, 0.0
    variance = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(variance / n)


def aggregate_rows(runs: Sequence[Tuple[str, int, Sequence[MetricsRow]]]) -> AggregateTable:
    """
    Moyenne et erreur standard par épisode entre graines

    Args:
        runs: (empreinte de configuration, graine, lignes de métriques) par run
    """
    if not runs:
        raise AggregationError("nothing to aggregate")
    digests = {digest for digest, _, _ in runs}
    if len(digests) != 1:
        raise AggregationError(f"runs come from {len(digests)} different configurations")
    lengths = {len(rows) for _, _, rows in runs}
    if len(lengths) != 1:
        raise AggregationError(f"runs have different episode counts: {sorted(lengths)}")

    ordered = sorted(runs, key=lambda run: run[1])
    degenerate = len(ordered) == 1
    if degenerate:
        logger.warning("Aggregating a single run: standard errors are reported as 0")

    table = []
    for episode in range(lengths.pop()):
        rows = [run_rows[episode] for _, _, run_rows in ordered]
        return_mean, return_se = _mean_and_se([row.mean_return for row in rows])
        rate_mean, rate_se = _mean_and_se([row.mistake_rate for row in rows])
        table.append(AggregateRow(
            episode=rows[0].episode,
            runs=len(rows),
            mean_return_mean=return_mean,
            mean_return_se=return_se,
            mistake_rate_mean=rate_mean,
            mistake_rate_se=rate_se,
            mistake_count_mean=math.fsum(row.mistake_count for row in rows) / len(rows),
            repeated_mistake_total=sum(row.repeated_mistake_count for row in rows),
        ))
    return AggregateTable(digests.pop(), [seed for _, seed, _ in ordered], table, degenerate)


def aggregate(artifacts: Sequence[RunArtifact]) -> AggregateTable:
    return aggregate_rows([(artifact.digest, artifact.seed, artifact.rows) for artifact in artifacts])


# ============================================================
# Écriture des résultats
# ============================================================

def write_rows_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(value) for value in row])
    return path


def write_metrics_csv(rows: Sequence[MetricsRow], path) -> Path:
    return write_rows_csv(path, METRICS_HEADER, (row.values() for row in rows))


def write_evaluation_csv(rows: Sequence[EvaluationRow], path) -> Path:
    return write_rows_csv(path, EVALUATION_HEADER, (row.values() for row in rows))


def write_aggregate_csv(table: AggregateTable, path) -> Path:
    return write_rows_csv(path, AGGREGATE_HEADER, (row.values() for row in table.rows))


def write_run_outputs(artifact: RunArtifact, out_dir) -> List[Path]:
    """Fichiers d'un run : métriques, évaluations, journal d'erreurs, boucliers, points de contrôle"""
    out_dir = Path(out_dir)
    config = artifact.config
    tag = f'seed{artifact.seed}'
    paths = [write_metrics_csv(artifact.rows, out_dir / f'metrics_{tag}.csv')]
    if config['eval_every']:
        paths.append(write_evaluation_csv(artifact.evaluation_rows, out_dir / f'evaluation_{tag}.csv'))
    if config['save_mistake_log']:
        paths.append(write_mistake_log(artifact.mistake_log, out_dir / f'mistakes_{tag}.csv'))
    if config['save_shields']:
        for name, shield in sorted(artifact.shields.items()):
            paths.append(write_shield(shield, out_dir / f'shield_{tag}_{name}.shld'))
        if artifact.probe is not None:
            paths.append(write_shield(artifact.probe, out_dir / f'shield_{tag}_parametric.shld'))
    if config['save_checkpoints']:
        for index, network in enumerate(artifact.networks):
            paths.append(save_checkpoint(network, out_dir / f'checkpoint_{tag}_agent{index}.ckpt'))
    return paths


def experiment_summary(artifacts: Sequence[RunArtifact], table: AggregateTable) -> Dict:
    config = artifacts[0].config
    runs = [artifact.summary() for artifact in sorted(artifacts, key=lambda a: a.seed)]
    total_steps = sum(run['total_steps'] for run in runs)
    total_mistakes = sum(run['total_mistakes'] for run in runs)
    return {
        'name': config['name'],
        'protocol': config['protocol'],
        'config': config,
        'config_digest': table.digest,
        'seeds': table.seeds,
        'degenerate': table.degenerate,
        'runs': runs,
        'totals': {
            'steps': total_steps,
            'mistakes': total_mistakes,
            'repeated_mistakes': sum(run['repeated_mistakes'] for run in runs),
            'mistake_rate': total_mistakes / total_steps if total_steps else 0.0,
        },
    }


def write_experiment_outputs(artifacts: Sequence[RunArtifact], out_dir) -> Tuple[Dict, List[Path]]:
    """
    Écrit tous les runs d'une expérience sous ``out_dir/<nom>/``

    Returns:
        (résumé, chemins écrits)
    """
    if not artifacts:
        raise ExperimentError("no run artifacts to write")
    directory = Path(out_dir) / artifacts[0].config['name']
    paths = []
    for artifact in artifacts:
        paths.extend(write_run_outputs(artifact, directory))

    table = aggregate(artifacts)
    paths.append(write_aggregate_csv(table, directory / 'aggregate.csv'))
    summary = experiment_summary(artifacts, table)
    summary_path = directory / 'summary.json'
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    paths.append(summary_path)
    logger.info(f"Wrote {len(paths)} result file(s) to {directory}")
    return summary, paths


# ============================================================
# Tracé SVG
# ============================================================

PLOT_WIDTH = 960
PLOT_HEIGHT = 420
PANEL_WIDTH = 380
PANEL_HEIGHT = 280
PANEL_ORIGINS = ((70, 50), (550, 50))
PALETTE = ('#1f77b4', '#d62728', '#2ca02c', '#9467bd', '#ff7f0e', '#8c564b', '#e377c2', '#7f7f7f')


def symlog(value: float) -> float:
    """sign(x) * log10(1 + |x|)"""
    return math.copysign(math.log10(1.0 + abs(value)), value)


def read_aggregate_csv(path) -> List[Dict[str, float]]:
    path = Path(path)
    try:
        with path.open(newline='', encoding='utf-8') as handle:
            reader = csv.DictReader(handle)
            missing = set(AGGREGATE_HEADER) - set(reader.fieldnames or ())
            if missing:
                raise ExperimentError(f"{path}: not an aggregate CSV (missing {', '.join(sorted(missing))})")
            rows = [{key: float(row[key]) for key in AGGREGATE_HEADER} for row in reader]
    except FileNotFoundError:
        raise ExperimentError(f"{path}: no such file")
    except ValueError as exc:
        raise ExperimentError(f"{path}: malformed value ({exc})")
    if not rows:
        raise ExperimentError(f"{path}: no data rows to plot")
    return rows


def _series_label(path: Path) -> str:
    return path.parent.name if path.name == 'aggregate.csv' and path.parent.name else path.stem


def _span(values: Sequence[float], fallback: Tuple[float, float]) -> Tuple[float, float]:
    if not values:
        return fallback
    low, high = min(values), max(values)
    if high - low < 1e-12:
        return low - 1.0, high + 1.0
    return low, high


def _fmt(value: float) -> str:
    return f'{value:.2f}'


class _Panel:
    def __init__(self, origin: Tuple[int, int], x_span, y_span):
        self.ox, self.oy = origin
        self.x0, self.x1 = x_span
        self.y0, self.y1 = y_span

    def x(self, value: float) -> float:
        return self.ox + (value - self.x0) / (self.x1 - self.x0) * PANEL_WIDTH

    def y(self, value: float) -> float:
        return self.oy + PANEL_HEIGHT - (value - self.y0) / (self.y1 - self.y0) * PANEL_HEIGHT

    def points(self, pairs) -> str:
        return ' '.join(f'{_fmt(self.x(x))},{_fmt(self.y(y))}' for x, y in pairs)

    def frame(self, title: str, y_label: str) -> List[str]:
        ox, oy = self.ox, self.oy
        return [
            f'<rect x="{ox}" y="{oy}" width="{PANEL_WIDTH}" height="{PANEL_HEIGHT}" fill="none" stroke="#333"/>',
            f'<text x="{ox + PANEL_WIDTH / 2:.1f}" y="{oy - 12}" text-anchor="middle" font-size="14">{escape(title)}</text>',
            f'<text x="{ox}" y="{oy + PANEL_HEIGHT + 18}" font-size="11">{_fmt(self.x0)}</text>',
            f'<text x="{ox + PANEL_WIDTH}" y="{oy + PANEL_HEIGHT + 18}" text-anchor="end" font-size="11">{_fmt(self.x1)}</text>',
            f'<text x="{ox + PANEL_WIDTH / 2:.1f}" y="{oy + PANEL_HEIGHT + 34}" text-anchor="middle" font-size="12">episode</text>',
            f'<text x="{ox - 6}" y="{oy + PANEL_HEIGHT}" text-anchor="end" font-size="11">{_fmt(self.y0)}</text>',
            f'<text x="{ox - 6}" y="{oy + 10}" text-anchor="end" font-size="11">{_fmt(self.y1)}</text>',
            f'<text x="{ox - 50}" y="{oy + PANEL_HEIGHT / 2:.1f}" font-size="12" '
            f'transform="rotate(-90 {ox - 50} {oy + PANEL_HEIGHT / 2:.1f})" text-anchor="middle">{escape(y_label)}</text>',
        ]


def render_plot(series: Sequence[Tuple[str, Sequence[Dict[str, float]]]]) -> str:
    """
    SVG à deux panneaux : rendement moyen en échelle symlog avec bande
    d'erreur standard (gauche), log10 du taux d'erreur (droite)
    """
    if not series:
        raise ExperimentError("no series to plot")

    episodes = [row['episode'] for _, rows in series for row in rows]
    x_span = _span(episodes, (0.0, 1.0))

    returns = []
    for _, rows in series:
        for row in rows:
            returns.extend(symlog(row['mean_return_mean'] + d * row['mean_return_se']) for d in (-1.0, 1.0))
    left = _Panel(PANEL_ORIGINS[0], x_span, _span(returns, (-1.0, 1.0)))

    rates = [math.log10(row['mistake_rate_mean']) for _, rows in series for row in rows if row['mistake_rate_mean'] > 0]
    right = _Panel(PANEL_ORIGINS[1], x_span, _span(rates, (-1.0, 0.0)))

    # la légende s'allonge d'une ligne par série
    height = max(PLOT_HEIGHT, PANEL_ORIGINS[0][1] + PANEL_HEIGHT + 60 + 16 * len(series))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_WIDTH}" height="{height}" '
        f'viewBox="0 0 {PLOT_WIDTH} {height}">',
        f'<rect width="{PLOT_WIDTH}" height="{height}" fill="white"/>',
    ]
    parts += left.frame('Mean episodic return', 'symlog(return)')
    parts += right.frame('Mistake rate', 'log10(mistakes / steps)')

    for index, (label, rows) in enumerate(series):
        color = PALETTE[index % len(PALETTE)]
        if any(row['mean_return_se'] > 0 for row in rows):
            upper = [(row['episode'], symlog(row['mean_return_mean'] + row['mean_return_se'])) for row in rows]
            lower = [(row['episode'], symlog(row['mean_return_mean'] - row['mean_return_se'])) for row in reversed(rows)]
            parts.append(
                f'<polygon class="se-band" points="{left.points(upper + lower)}" fill="{color}" fill-opacity="0.2" stroke="none"/>'
            )
        mean_points = [(row['episode'], symlog(row['mean_return_mean'])) for row in rows]
        parts.append(f'<polyline class="return" points="{left.points(mean_points)}" fill="none" stroke="{color}"/>')

        rate_points = [(row['episode'], math.log10(row['mistake_rate_mean'])) for row in rows if row['mistake_rate_mean'] > 0]
        if rate_points:
            parts.append(f'<polyline class="mistake-rate" points="{right.points(rate_points)}" fill="none" stroke="{color}"/>')

        legend_y = PANEL_ORIGINS[0][1] + PANEL_HEIGHT + 50 + 16 * index
        parts.append(
            f'<g class="legend-entry"><rect x="{PANEL_ORIGINS[0][0]}" y="{legend_y - 9}" width="12" height="10" fill="{color}"/>'
            f'<text x="{PANEL_ORIGINS[0][0] + 18}" y="{legend_y}" font-size="12">{escape(label)}</text></g>'
        )

    parts.append('</svg>')
    return '\n'.join(parts) + '\n'


def write_plot(csv_paths: Sequence, out_path) -> Path:
    """Lit tous les CSV agrégés avant d'écrire quoi que ce soit"""
    series = []
    for path in csv_paths:
        path = Path(path)
        series.append((_series_label(path), read_aggregate_csv(path)))
    svg = render_plot(series)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(svg, encoding='utf-8')
    return out_path


# ============================================================
# Archivage en base
# ============================================================

@transaction.atomic
def persist_artifact(artifact: RunArtifact):
    """Enregistre un run, ses métriques et ses boucliers"""
    from shields.models import StoredShield
    from .models import EpisodeMetric, ExperimentRun

    run = ExperimentRun.objects.create(
        name=artifact.config['name'],
        protocol=artifact.protocol,
        seed=artifact.seed,
        config=artifact.config,
        config_digest=artifact.digest,
        episode_count=len(artifact.rows),
        total_steps=artifact.total_steps,
        total_mistakes=artifact.total_mistakes,
        repeated_mistakes=artifact.repeated_mistakes,
        wall_clock_seconds=artifact.wall_clock,
    )
    EpisodeMetric.objects.bulk_create([
        EpisodeMetric(
            run=run, episode=row.episode, mean_return=row.mean_return, mistake_count=row.mistake_count,
            step_count=row.step_count, mistake_rate=row.mistake_rate,
            repeated_mistake_count=row.repeated_mistake_count, goal_count=row.goal_count,
        )
        for row in artifact.rows
    ])
    shields = dict(artifact.shields)
    if artifact.probe is not None:
        shields['parametric'] = artifact.probe
    StoredShield.objects.bulk_create([
        StoredShield(run=run, name=name, variant=shield.variant_name, entry_count=len(shield), payload=shield.serialize())
        for name, shield in sorted(shields.items())
    ])
    logger.info(f"Persisted run {run.id} ({len(artifact.rows)} episodes, {len(shields)} shield(s))")
    return run


def stored_rows(run) -> List[MetricsRow]:
    return [
        MetricsRow(run.seed, metric.episode, metric.mean_return, metric.mistake_count, metric.step_count,
                   metric.mistake_rate, metric.repeated_mistake_count, metric.goal_count)
        for metric in run.metrics.order_by('episode')
    ]


def aggregate_stored_runs(runs) -> AggregateTable:
    """Agrège des ExperimentRun archivés (même empreinte de configuration)"""
    return aggregate_rows([(run.config_digest, run.seed, stored_rows(run)) for run in runs])
