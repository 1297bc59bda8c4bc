"""
Services pour les agents PPO et ShieldPPO
Réseau feed-forward à rétropropagation écrite à la main (numpy), estimation
d'avantage généralisée, mise à jour PPO à objectif tronqué et variante
ShieldPPO qui masque les actions connues comme catastrophiques et enregistre
chaque erreur observée dans le bouclier.
"""
import csv
import logging
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from pomdp.services import EnvSpec, Observation, StateKey, Transition
from shields.services import Shield, ShieldKey, apply_shield
from .exceptions import CheckpointFormatError, NumericalError

logger = logging.getLogger(__name__)

PARAM_NAMES = ('W1', 'b1', 'W2', 'b2', 'Wp', 'bp', 'Wv', 'bv')

CHECKPOINT_MAGIC = b'SBCK'
CHECKPOINT_VERSION = 1

ADVANTAGE_STD_FLOOR = 1e-8


@dataclass
class PPOConfig:
    """Hyperparamètres PPO (valeurs par défaut usuelles)"""

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


def flatten_observation(obs: Observation, spec: EnvSpec) -> np.ndarray:
    """
    Vecteur d'entrée du réseau

    one-hot des codes de case de la fenêtre || écart au but ramené dans [-1, 1] || one-hot d'instance
    """
    window = np.eye(spec.cell_code_count, dtype=np.float64)[obs.window.reshape(-1)].reshape(-1)
    scale = np.maximum(np.asarray(spec.goal_scale, dtype=np.float64), 1.0)
    goal = np.clip(np.asarray(obs.goal_delta, dtype=np.float64) / scale, -1.0, 1.0)
    return np.concatenate([window, goal, obs.instance_onehot.astype(np.float64)])


def masked_log_softmax(logits: np.ndarray, masks: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Log-probabilités de la politique restreinte aux actions sûres

    Returns:
        (log_probs, allowed, active) : log_probs vaut -inf hors des actions
        autorisées ; active est faux pour les lignes sans action sûre (la
        politique par défaut y prend le relais, indépendante des paramètres)
    """
    safe = masks != 0
    active = safe.any(axis=1)
    allowed = np.where(active[:, None], safe, True)
    shifted = np.where(allowed, logits, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = np.where(allowed, shifted - log_norm, -np.inf)
    return log_probs, allowed, active


class PolicyNetwork:
    """
    Tronc partagé à deux couches tanh, tête de logits et tête de valeur

    Les paramètres sont rangés dans un dict nommé selon PARAM_NAMES.
    """

    def __init__(self, input_size: int, action_count: int, hidden: int = 64,
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_size = input_size
        self.action_count = action_count
        self.hidden = hidden

        def layer(fan_in, fan_out, gain):
            return rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out))

        self.params: Dict[str, np.ndarray] = {
            'W1': layer(input_size, hidden, 1.0),
            'b1': np.zeros(hidden),
            'W2': layer(hidden, hidden, 1.0),
            'b2': np.zeros(hidden),
            'Wp': layer(hidden, action_count, 0.01),
            'bp': np.zeros(action_count),
            'Wv': layer(hidden, 1, 1.0),
            'bv': np.zeros(1),
        }

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, features: np.ndarray):
        p = self.params
        x = np.atleast_2d(features)
        h1 = np.tanh(x @ p['W1'] + p['b1'])
        h2 = np.tanh(h1 @ p['W2'] + p['b2'])
        logits = h2 @ p['Wp'] + p['bp']
        values = (h2 @ p['Wv'] + p['bv'])[:, 0]
        return logits, values, (x, h1, h2)

    def backward(self, cache, d_logits: np.ndarray, d_values: np.ndarray) -> Dict[str, np.ndarray]:
        p = self.params
        x, h1, h2 = cache
        d_values = d_values[:, None]
        grads = {
            'Wp': h2.T @ d_logits,
            'bp': d_logits.sum(axis=0),
            'Wv': h2.T @ d_values,
            'bv': d_values.sum(axis=0),
        }
        d_h2 = d_logits @ p['Wp'].T + d_values @ p['Wv'].T
        d_a2 = d_h2 * (1.0 - h2 ** 2)
        grads['W2'] = h1.T @ d_a2
        grads['b2'] = d_a2.sum(axis=0)
        d_a1 = (d_a2 @ p['W2'].T) * (1.0 - h1 ** 2)
        grads['W1'] = x.T @ d_a1
        grads['b1'] = d_a1.sum(axis=0)
        return grads

    def copy_params(self) -> Dict[str, np.ndarray]:
        return {name: value.copy() for name, value in self.params.items()}

    def load_params(self, params: Dict[str, np.ndarray]) -> None:
        for name in PARAM_NAMES:
            if params[name].shape != self.params[name].shape:
                raise CheckpointFormatError(
                    f"Parameter {name} has shape {params[name].shape}, expected {self.params[name].shape}"
                )
        self.params = {name: np.array(params[name], dtype=np.float64) for name in PARAM_NAMES}


class AdamOptimizer:
    """Pas adaptatif par paramètre (moments d'ordre 1 et 2), gradient écrêté en norme"""

    def __init__(self, learning_rate: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 max_grad_norm: Optional[float] = 0.5):
        self.learning_rate = learning_rate
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> float:
        norm = float(np.sqrt(sum(float(np.sum(g ** 2)) for g in grads.values())))
        scale = 1.0
        if self.max_grad_norm and norm > self.max_grad_norm:
            scale = self.max_grad_norm / (norm + 1e-12)

        self.t += 1
        for name, grad in grads.items():
            grad = grad * scale
            m = self.m.setdefault(name, np.zeros_like(grad))
            v = self.v.setdefault(name, np.zeros_like(grad))
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad ** 2
            m_hat = m / (1.0 - self.beta1 ** self.t)
            v_hat = v / (1.0 - self.beta2 ** self.t)
            params[name] -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        return norm


def compute_gae(rewards, values, terminals, ends, bootstrap_values, gamma: float, lam: float):
    """
    Estimation d'avantage généralisée

    Args:
        rewards, values: par pas
        terminals: vrai si le pas termine l'épisode (pas d'amorçage)
        ends: vrai si le segment s'arrête après ce pas (terminal, troncature ou fin de collecte)
        bootstrap_values: V(s_{t+1}) utilisée quand ends[t] et pas terminals[t]

    Returns:
        (advantages, returns), returns = advantages + values
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    size = len(rewards)
    advantages = np.zeros(size)
    next_advantage = 0.0
    for t in reversed(range(size)):
        if ends[t]:
            next_value = 0.0 if terminals[t] else float(bootstrap_values[t])
            next_advantage = 0.0
        else:
            next_value = values[t + 1]
        delta = rewards[t] + gamma * next_value - values[t]
        next_advantage = delta + gamma * lam * next_advantage
        advantages[t] = next_advantage
    return advantages, advantages + values


@dataclass
class RolloutBuffer:
    """Transitions d'un segment de collecte, vidé après chaque mise à jour"""

    features: List[np.ndarray] = field(default_factory=list)
    actions: List[int] = field(default_factory=list)
    log_probs: List[float] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    masks: List[np.ndarray] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    terminals: List[bool] = field(default_factory=list)
    ends: List[bool] = field(default_factory=list)
    bootstrap_values: List[float] = field(default_factory=list)
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.actions)

    def add(self, features, action, log_prob, value, mask, reward, terminal, end, bootstrap_value=0.0):
        self.features.append(features)
        self.actions.append(int(action))
        self.log_probs.append(float(log_prob))
        self.values.append(float(value))
        self.masks.append(np.asarray(mask, dtype=np.int8))
        self.rewards.append(float(reward))
        self.terminals.append(bool(terminal))
        self.ends.append(bool(end))
        self.bootstrap_values.append(float(bootstrap_value))
        self.advantages = None

    def close_segment(self, bootstrap_value: float) -> None:
        """Marque la fin de collecte sur un épisode en cours"""
        if self.actions and not self.ends[-1]:
            self.ends[-1] = True
            self.bootstrap_values[-1] = float(bootstrap_value)

    def compute_advantages(self, gamma: float, lam: float) -> None:
        if self.actions and not self.ends[-1]:
            raise ValueError("Advantages need a closed segment; call close_segment() first")
        self.advantages, self.returns = compute_gae(
            self.rewards, self.values, self.terminals, self.ends, self.bootstrap_values, gamma, lam
        )

    def batch(self) -> Dict[str, np.ndarray]:
        return {
            'features': np.stack(self.features),
            'actions': np.asarray(self.actions, dtype=np.int64),
            'old_log_probs': np.asarray(self.log_probs),
            'masks': np.stack(self.masks),
            'advantages': np.asarray(self.advantages),
            'returns': np.asarray(self.returns),
        }

    def clear(self) -> None:
        for name in ('features', 'actions', 'log_probs', 'values', 'masks', 'rewards',
                     'terminals', 'ends', 'bootstrap_values'):
            getattr(self, name).clear()
        self.advantages = None
        self.returns = None


def ppo_loss_and_grad(network: PolicyNetwork, batch: Dict[str, np.ndarray], clip: float,
                      value_coef: float, entropy_coef: float):
    """
    Perte PPO totale à minimiser et son gradient

    L = -moyenne(min(r A, clip(r) A)) + value_coef * moyenne((V - R)^2) - entropy_coef * moyenne(H)

    Les ratios et l'entropie portent sur la distribution restreinte aux actions
    sûres (masques enregistrés à l'échantillonnage).
    """
    features = batch['features']
    actions = batch['actions']
    advantages = batch['advantages']
    returns = batch['returns']
    size = len(actions)
    rows = np.arange(size)

    logits, values, cache = network.forward(features)
    log_probs, allowed, active = masked_log_softmax(logits, batch['masks'])
    probs = np.where(allowed, np.exp(log_probs), 0.0)
    finite_log_probs = np.where(allowed, log_probs, 0.0)

    chosen = log_probs[rows, actions]
    ratio = np.where(active, np.exp(np.where(active, chosen - batch['old_log_probs'], 0.0)), 1.0)
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    unclipped_term = ratio * advantages
    clipped_term = clipped * advantages
    surrogate = np.where(active, np.minimum(unclipped_term, clipped_term), 0.0)
    through_ratio = active & (unclipped_term <= clipped_term)

    entropy = np.where(active, -np.sum(probs * finite_log_probs, axis=1), 0.0)

    policy_loss = -float(surrogate.sum()) / size
    value_loss = float(np.mean((values - returns) ** 2))
    entropy_mean = float(entropy.sum()) / size
    loss = policy_loss + value_coef * value_loss - entropy_coef * entropy_mean

    # dL/dlogits : terme de politique
    d_logp = np.where(through_ratio, -ratio * advantages / size, 0.0)
    one_hot = np.zeros_like(probs)
    one_hot[rows, actions] = 1.0
    d_logits = d_logp[:, None] * (one_hot - probs)
    # terme d'entropie : dH/dz_j = -p_j (log p_j + H)
    d_logits += np.where(
        active[:, None], entropy_coef / size * probs * (finite_log_probs + entropy[:, None]), 0.0
    )
    d_values = 2.0 * value_coef * (values - returns) / size

    grads = network.backward(cache, d_logits, d_values)
    stats = {
        'loss': loss,
        'policy_loss': policy_loss,
        'value_loss': value_loss,
        'entropy': entropy_mean,
        'clip_fraction': float(np.mean(np.abs(ratio - 1.0) > clip)),
        'approx_kl': float(np.mean(np.where(active, batch['old_log_probs'] - np.where(active, chosen, 0.0), 0.0))),
    }
    return stats, grads


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    std = max(float(np.std(advantages)), ADVANTAGE_STD_FLOOR)
    return (advantages - float(np.mean(advantages))) / std


def ppo_update(network: PolicyNetwork, optimizer: AdamOptimizer, buffer: RolloutBuffer,
               config: PPOConfig, rng: np.random.Generator) -> Dict[str, float]:
    """
    Montée de gradient par mini-lots sur l'objectif tronqué

    Une perte non finie interrompt la mise à jour : les paramètres d'avant la
    mise à jour sont restaurés et les statistiques portent aborted = True.
    """
    if not len(buffer):
        raise ValueError("ppo_update needs at least one collected step")
    if buffer.advantages is None:
        buffer.compute_advantages(config.gamma, config.lam)

    data = buffer.batch()
    data['advantages'] = normalize_advantages(data['advantages'])
    size = len(data['actions'])
    snapshot = network.copy_params()
    totals = {'loss': 0.0, 'policy_loss': 0.0, 'value_loss': 0.0, 'entropy': 0.0,
              'clip_fraction': 0.0, 'approx_kl': 0.0}
    batches = 0

    for _ in range(config.epochs):
        order = rng.permutation(size)
        for begin in range(0, size, config.minibatch):
            index = order[begin:begin + config.minibatch]
            minibatch = {name: value[index] for name, value in data.items()}
            stats, grads = ppo_loss_and_grad(
                network, minibatch, config.clip, config.value_coef, config.entropy_coef
            )
            if not np.isfinite(stats['loss']) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                network.load_params(snapshot)
                logger.error(f"PPO update aborted: non-finite loss {stats}")
                return {**stats, 'aborted': True, 'steps': size}
            optimizer.step(network.params, grads)
            for name in totals:
                totals[name] += stats[name]
            batches += 1

    summary = {name: value / max(batches, 1) for name, value in totals.items()}
    summary.update({'aborted': False, 'steps': size})
    logger.debug(
        f"PPO update on {size} steps: policy {summary['policy_loss']:.4f}, "
        f"value {summary['value_loss']:.4f}, entropy {summary['entropy']:.4f}"
    )
    return summary


class MistakeLedger:
    """Registre des paires catastrophiques déjà commises (détection des répétitions)"""

    def __init__(self):
        self._seen = set()
        self._lock = threading.Lock()
        self.repeated = 0

    def observe(self, key: ShieldKey) -> bool:
        with self._lock:
            if key in self._seen:
                self.repeated += 1
                return True
            self._seen.add(key)
            return False

    def __len__(self) -> int:
        return len(self._seen)


@dataclass(frozen=True)
class MistakeEntry:
    episode: int
    step: int
    agent: int
    key: ShieldKey


@dataclass
class Decision:
    action: int
    log_prob: float
    value: float
    mask: np.ndarray
    features: np.ndarray
    distribution: np.ndarray


class PPOAgent:
    """
    Agent PPO ; avec un bouclier, c'est ShieldPPO

    Le bouclier est interrogé pour chaque action au moment de l'échantillonnage
    et chaque transition étiquetée 0 y est enregistrée avant l'action suivante.
    """

    def __init__(self, spec: EnvSpec, config: Optional[PPOConfig] = None,
                 rng: Optional[np.random.Generator] = None, shield: Optional[Shield] = None,
                 default_policy: Optional[Sequence[float]] = None, agent_id: int = 0,
                 ledger: Optional[MistakeLedger] = None):
        self.spec = spec
        self.config = config or PPOConfig()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.shield = shield
        self.agent_id = agent_id
        self.ledger = ledger if ledger is not None else MistakeLedger()
        if default_policy is None:
            default_policy = np.full(spec.action_count, 1.0 / spec.action_count)
        self.default_policy = np.asarray(default_policy, dtype=np.float64)
        if self.default_policy.shape != (spec.action_count,) or abs(self.default_policy.sum() - 1.0) > 1e-9:
            raise ValueError("default_policy must be a distribution over the action set")

        self.network = PolicyNetwork(spec.feature_size, spec.action_count, self.config.hidden, self.rng)
        self.optimizer = AdamOptimizer(self.config.learning_rate, max_grad_norm=self.config.max_grad_norm)
        self.buffer = RolloutBuffer()
        self.mistake_log: List[MistakeEntry] = []
        self.update_count = 0

    @property
    def shielded(self) -> bool:
        return self.shield is not None

    def action_mask(self, state_key: StateKey) -> np.ndarray:
        if self.shield is None:
            return np.ones(self.spec.action_count, dtype=np.int8)
        return self.shield.mask(state_key, self.spec.action_count)

    def decide(self, obs: Observation, state_key: StateKey, greedy: bool = False) -> Decision:
        features = flatten_observation(obs, self.spec)
        logits, values, _ = self.network.forward(features)
        if not np.all(np.isfinite(logits)) or not np.isfinite(values[0]):
            raise NumericalError(
                f"Non-finite network output for agent {self.agent_id}",
                dump={
                    'logits': logits.tolist(),
                    'value': float(values[0]),
                    'state_key': repr(state_key),
                    'param_norms': {k: float(np.linalg.norm(v)) for k, v in self.network.params.items()},
                },
            )

        mask = self.action_mask(state_key)
        probs = np.exp(logits[0] - logits[0].max())
        distribution = apply_shield(probs / probs.sum(), mask, self.default_policy)
        log_probs, _, active = masked_log_softmax(logits, mask[None, :])

        if greedy:
            action = int(np.argmax(distribution))
        else:
            action = int(self.rng.choice(self.spec.action_count, p=distribution))
        log_prob = float(log_probs[0, action]) if active[0] else float(np.log(distribution[action]))
        return Decision(action, log_prob, float(values[0]), mask, features, distribution)

    def sample_action(self, obs: Observation, state_key: StateKey, greedy: bool = False) -> Tuple[int, float]:
        decision = self.decide(obs, state_key, greedy)
        return decision.action, decision.log_prob

    def value(self, obs: Observation) -> float:
        _, values, _ = self.network.forward(flatten_observation(obs, self.spec))
        return float(values[0])

    def record_mistakes(self, transition: Transition, episode: int = 0, step: int = 0) -> bool:
        """
        Enregistre la transition si elle est étiquetée 0

        Returns:
            True si la paire avait déjà été commise dans la portée du registre
        """
        if not transition.is_mistake:
            return False
        key = ShieldKey(transition.state_key, transition.action)
        if self.shield is not None:
            self.shield.record(key)
        self.mistake_log.append(MistakeEntry(episode, step, self.agent_id, key))
        repeated = self.ledger.observe(key)
        logger.debug(f"Agent {self.agent_id} recorded mistake {key!r} (episode {episode}, step {step})")
        if repeated:
            logger.warning(f"Agent {self.agent_id} repeated mistake {key!r}")
        return repeated

    def store(self, decision: Decision, transition: Transition) -> None:
        bootstrap = self.value(transition.next_obs) if transition.truncated else 0.0
        self.buffer.add(
            decision.features, decision.action, decision.log_prob, decision.value, decision.mask,
            transition.reward, transition.terminal, transition.episode_over, bootstrap,
        )

    def ready(self) -> bool:
        return len(self.buffer) >= self.config.segment

    def update(self, bootstrap_value: float = 0.0) -> Dict[str, float]:
        self.buffer.close_segment(bootstrap_value)
        self.buffer.compute_advantages(self.config.gamma, self.config.lam)
        stats = ppo_update(self.network, self.optimizer, self.buffer, self.config, self.rng)
        self.buffer.clear()
        self.update_count += 1
        return stats


def save_checkpoint(network: PolicyNetwork, path) -> Path:
    """
    Format binaire versionné :
    'SBCK' | u16 version | u32 nombre de tenseurs | pour chaque tenseur :
    u8 longueur du nom, nom ASCII, u8 rang, u32 par dimension, f64 little-endian
    """
    chunks = [struct.pack('<4sHI', CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(PARAM_NAMES))]
    for name in PARAM_NAMES:
        value = network.params[name]
        encoded = name.encode('ascii')
        chunks.append(struct.pack('<B', len(encoded)) + encoded)
        chunks.append(struct.pack('<B', value.ndim) + struct.pack(f'<{value.ndim}I', *value.shape))
        chunks.append(value.astype('<f8').tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b''.join(chunks))
    return path


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    offset = 0

    def take(size):
        nonlocal offset
        if offset + size > len(data):
            raise CheckpointFormatError(f"Truncated checkpoint at offset {offset}")
        chunk = data[offset:offset + size]
        offset += size
        return chunk

    magic, version, count = struct.unpack('<4sHI', take(10))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"Bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"Unsupported checkpoint version {version}")

    params = {}
    for _ in range(count):
        (length,) = struct.unpack('<B', take(1))
        name = take(length).decode('ascii', errors='replace')
        (ndim,) = struct.unpack('<B', take(1))
        shape = struct.unpack(f'<{ndim}I', take(4 * ndim))
        size = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(take(8 * size), dtype='<f8').astype(np.float64).reshape(shape)
    if offset != len(data):
        raise CheckpointFormatError(f"{len(data) - offset} trailing bytes in checkpoint")
    missing = set(PARAM_NAMES) - set(params)
    if missing:
        raise CheckpointFormatError(f"Checkpoint lacks tensors {sorted(missing)}")
    return params


MISTAKE_LOG_HEADER = ('episode', 'step', 'agent', 'key')


def write_mistake_log(entries: Iterable[MistakeEntry], path) -> Path:
    """CSV episode,step,agent,key ; la clé est la ShieldKey sérialisée en hexadécimal"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(MISTAKE_LOG_HEADER)
        for entry in entries:
            writer.writerow([entry.episode, entry.step, entry.agent, entry.key.to_bytes().hex()])
    return path


def read_mistake_log(path) -> List[MistakeEntry]:
    with Path(path).open(newline='') as handle:
        reader = csv.DictReader(handle)
        return [
            MistakeEntry(int(row['episode']), int(row['step']), int(row['agent']),
                         ShieldKey.from_bytes(bytes.fromhex(row['key'])))
            for row in reader
        ]
