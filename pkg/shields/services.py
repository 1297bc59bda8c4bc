"""
Boucliers appris en ligne : table exacte, table bornée (LRU), filtre de Bloom
et classifieur paramétrique, plus la règle d'application du bouclier et le
format binaire partagé entre agents.

Convention : query() retourne 1 si la paire (état, action) est jugée sûre,
0 si elle est connue (ou prédite) catastrophique.
"""
import hashlib
import logging
import math
import struct
import threading
from abc import ABC, abstractmethod
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set

import numpy as np

from pomdp.exceptions import StateKeyFormatError
from pomdp.services import SAFE, STATE_KEY_SIZE, UNSAFE, StateKey
from .exceptions import ShieldError, ShieldFormatError, ShieldMergeError, ShieldTrainingError

logger = logging.getLogger(__name__)

SHIELD_MAGIC = b'SHLD'
SHIELD_FORMAT_VERSION = 1
_HEADER = struct.Struct('<4sHB')

VARIANT_TABULAR = 1
VARIANT_BOUNDED = 2
VARIANT_BLOOM = 3
VARIANT_PARAMETRIC = 4

VARIANT_NAMES = {
    VARIANT_TABULAR: 'tabular',
    VARIANT_BOUNDED: 'bounded',
    VARIANT_BLOOM: 'bloom',
    VARIANT_PARAMETRIC: 'parametric',
}

SHIELD_KEY_SIZE = STATE_KEY_SIZE + 1


@dataclass(frozen=True, order=True)
class ShieldKey:
    """Paire (état, action) ; l'ordre total est celui des octets sérialisés"""

    state: StateKey
    action: int

    def __post_init__(self):
        if not 0 <= self.action < 256:
            raise ValueError(f"Action {self.action} does not fit the key layout")

    def to_bytes(self) -> bytes:
        return self.state.to_bytes() + bytes((self.action,))

    @classmethod
    def from_bytes(cls, data: bytes) -> 'ShieldKey':
        if len(data) != SHIELD_KEY_SIZE:
            raise ValueError(f"Shield key must be {SHIELD_KEY_SIZE} bytes")
        return cls(StateKey.from_bytes(data[:STATE_KEY_SIZE]), data[STATE_KEY_SIZE])

    def describe(self) -> Dict[str, int]:
        fields = self.state.unpack()
        fields['action'] = self.action
        return fields


class Shield(ABC):
    """Fonction binaire S : S x A -> {0, 1} apprise à partir des erreurs observées"""

    variant: int = 0

    @property
    def variant_name(self) -> str:
        return VARIANT_NAMES[self.variant]

    @abstractmethod
    def query(self, key: ShieldKey) -> int:
        """1 si la paire est sûre, 0 sinon"""

    @abstractmethod
    def record(self, key: ShieldKey) -> None:
        """Enregistre une paire dont l'étiquette observée vaut 0"""

    @abstractmethod
    def __len__(self) -> int:
        pass

    @abstractmethod
    def _payload(self) -> bytes:
        pass

    def mask(self, state: StateKey, action_count: int) -> np.ndarray:
        """Vecteur de bits de sécurité pour toutes les actions d'un état"""
        return np.array(
            [self.query(ShieldKey(state, action)) for action in range(action_count)],
            dtype=np.int8,
        )

    def serialize(self) -> bytes:
        return _HEADER.pack(SHIELD_MAGIC, SHIELD_FORMAT_VERSION, self.variant) + self._payload()


class TabularShield(Shield):
    """
    Table exacte des paires catastrophiques découvertes.

    Pas de faux positifs ni de faux négatifs. Les écritures sont sérialisées
    par un verrou ; les lectures n'en prennent pas, un test d'appartenance à
    un set étant atomique, donc plusieurs agents peuvent partager la table.
    """

    variant = VARIANT_TABULAR

    def __init__(self, entries: Iterable[ShieldKey] = ()):
        self._entries: Set[ShieldKey] = set()
        self._lock = threading.Lock()
        self.insertion_counter = 0
        for key in entries:
            self.record(key)

    def query(self, key: ShieldKey) -> int:
        return UNSAFE if key in self._entries else SAFE

    def record(self, key: ShieldKey) -> None:
        with self._lock:
            if key in self._entries:
                return
            self._entries.add(key)
            self.insertion_counter += 1
        logger.debug(f"Tabular shield recorded {key!r} (size {len(self._entries)})")

    def entries(self) -> List[ShieldKey]:
        with self._lock:
            return sorted(self._entries)

    def __contains__(self, key: ShieldKey) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def _payload(self) -> bytes:
        keys = self.entries()
        return struct.pack('<Q', len(keys)) + b''.join(key.to_bytes() for key in keys)


class BoundedShield(Shield):
    """Table à capacité fixe : éviction de la clé la moins récemment interrogée ou enregistrée"""

    variant = VARIANT_BOUNDED

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self._entries: 'OrderedDict[ShieldKey, int]' = OrderedDict()
        self._clock = 0
        self._lock = threading.Lock()
        self.evictions = 0

    def _touch(self, key: ShieldKey) -> None:
        self._clock += 1
        self._entries[key] = self._clock
        self._entries.move_to_end(key)

    def query(self, key: ShieldKey) -> int:
        with self._lock:
            if key not in self._entries:
                return SAFE
            self._touch(key)
            return UNSAFE

    def record(self, key: ShieldKey) -> None:
        with self._lock:
            self._touch(key)
            while len(self._entries) > self.capacity:
                evicted, _ = self._entries.popitem(last=False)
                self.evictions += 1
                logger.debug(f"Bounded shield evicted {evicted!r}")

    def entries(self) -> List[ShieldKey]:
        """Clés de la plus ancienne à la plus récente"""
        with self._lock:
            return list(self._entries)

    def __contains__(self, key: ShieldKey) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def _payload(self) -> bytes:
        keys = self.entries()
        head = struct.pack('<QQ', self.capacity, len(keys))
        return head + b''.join(key.to_bytes() for key in keys)


def bloom_dimensions(expected_n: int, target_fp: float):
    """
    Dimensionnement standard d'un filtre de Bloom.

    m = ceil(-n ln p / (ln 2)^2), k = max(1, round((m / n) ln 2))
    """
    if expected_n < 1:
        raise ValueError("expected_n must be at least 1")
    if not 0.0 < target_fp < 1.0:
        raise ValueError("target_fp must lie in (0, 1)")

    m = math.ceil(-expected_n * math.log(target_fp) / (math.log(2) ** 2))
    k = max(1, round((m / expected_n) * math.log(2)))
    return m, k


def _bloom_hashes(data: bytes):
    h1 = hashlib.blake2b(data, digest_size=8, person=b'shieldbench-h1').digest()
    h2 = hashlib.blake2b(data, digest_size=8, person=b'shieldbench-h2').digest()
    return int.from_bytes(h1, 'little'), int.from_bytes(h2, 'little')


class BloomShield(Shield):
    """
    Filtre de Bloom : faux positifs possibles, jamais de faux négatifs.

    Double hachage h_i = h1 + i * h2 (mod m) à partir de deux empreintes
    BLAKE2b 64 bits de la clé sérialisée.
    """

    variant = VARIANT_BLOOM

    def __init__(self, m: int, k: int, target_fp: Optional[float] = None):
        if m < 1 or k < 1:
            raise ValueError("Bloom filter needs m >= 1 and k >= 1")
        self.m = m
        self.k = k
        self.n = 0
        self.target_fp = target_fp
        self.bits = bytearray((m + 7) // 8)
        self._lock = threading.Lock()

    @classmethod
    def for_capacity(cls, expected_n: int, target_fp: float) -> 'BloomShield':
        m, k = bloom_dimensions(expected_n, target_fp)
        return cls(m, k, target_fp=target_fp)

    def _positions(self, key: ShieldKey) -> List[int]:
        h1, h2 = _bloom_hashes(key.to_bytes())
        return [(h1 + i * h2) % self.m for i in range(self.k)]

    def _all_set(self, positions: Sequence[int]) -> bool:
        bits = self.bits
        return all(bits[p >> 3] & (1 << (p & 7)) for p in positions)

    def query(self, key: ShieldKey) -> int:
        return UNSAFE if self._all_set(self._positions(key)) else SAFE

    def record(self, key: ShieldKey) -> None:
        positions = self._positions(key)
        # n compte les enregistrements : un faux positif est indiscernable d'une clé connue
        with self._lock:
            for p in positions:
                self.bits[p >> 3] |= 1 << (p & 7)
            self.n += 1

    def expected_fp_rate(self) -> float:
        return (1.0 - math.exp(-self.k * self.n / self.m)) ** self.k

    def __len__(self) -> int:
        return self.n

    def _payload(self) -> bytes:
        return struct.pack('<QQQ', self.m, self.k, self.n) + bytes(self.bits)


def key_features(key: ShieldKey, action_count: int) -> np.ndarray:
    """Bits de la StateKey concaténés au one-hot de l'action"""
    bits = np.unpackbits(np.frombuffer(key.state.to_bytes(), dtype=np.uint8)).astype(np.float64)
    action = np.zeros(action_count, dtype=np.float64)
    action[key.action] = 1.0
    return np.concatenate([bits, action])


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class ParametricShield(Shield):
    """
    Régression logistique sur (état, action) : score = P(sûr).

    Entraîné hors ligne par train_parametric ; record() n'est pas supporté.
    """

    variant = VARIANT_PARAMETRIC

    def __init__(self, weights: np.ndarray, bias: float, action_count: int,
                 threshold: float = 0.5, positive_count: int = 0,
                 feature_fn: Optional[Callable[[ShieldKey, int], np.ndarray]] = None):
        if not 0.0 < threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        self.feature_fn = feature_fn or key_features
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = float(bias)
        self.action_count = action_count
        self.threshold = threshold
        self.positive_count = positive_count
        self.loss_history: List[float] = []

    def score(self, key: ShieldKey) -> float:
        return float(_sigmoid(self.weights @ self.feature_fn(key, self.action_count) + self.bias))

    def query(self, key: ShieldKey) -> int:
        return SAFE if self.score(key) >= self.threshold else UNSAFE

    def record(self, key: ShieldKey) -> None:
        raise ShieldError("Parametric shields are trained offline; use train_parametric()")

    def __len__(self) -> int:
        return self.positive_count

    def _payload(self) -> bytes:
        head = struct.pack('<BdQQ', self.action_count, self.threshold, self.positive_count, self.weights.size)
        return head + self.weights.astype('<f8').tobytes() + struct.pack('<d', self.bias)


def parametric_loss_and_grad(theta: np.ndarray, unsafe_features: np.ndarray, safe_features: np.ndarray):
    """
    Entropie croisée binaire du bouclier paramétrique.

    theta = [poids..., biais]. Les paires sûres ont l'étiquette 1, les paires
    catastrophiques l'étiquette 0 ; chaque classe contribue par sa moyenne.
    """
    weights, bias = theta[:-1], theta[-1]
    grad = np.zeros_like(theta)
    loss = 0.0

    if len(safe_features):
        logits = safe_features @ weights + bias
        loss += float(np.mean(np.logaddexp(0.0, -logits)))
        residual = (_sigmoid(logits) - 1.0) / len(safe_features)
        grad[:-1] += safe_features.T @ residual
        grad[-1] += residual.sum()

    if len(unsafe_features):
        logits = unsafe_features @ weights + bias
        loss += float(np.mean(np.logaddexp(0.0, logits)))
        residual = _sigmoid(logits) / len(unsafe_features)
        grad[:-1] += unsafe_features.T @ residual
        grad[-1] += residual.sum()

    return loss, grad


def train_parametric(
    positives: Iterable[ShieldKey],
    negatives: Iterable[ShieldKey],
    epochs: int = 200,
    learning_rate: float = 0.05,
    action_count: int = 3,
    threshold: float = 0.5,
    feature_fn: Optional[Callable[[ShieldKey, int], np.ndarray]] = None,
) -> ParametricShield:
    """
    Ajuste un ParametricShield par descente de gradient à pas fixe.

    positives : paires catastrophiques enregistrées ; negatives : paires
    vécues sans incident (approximation du complémentaire). Le pas est
    plafonné à 1/L (L borne la courbure de la perte), ce qui rend la perte
    non croissante d'une époque à l'autre.
    """
    positives = sorted(set(positives))
    negatives = sorted(set(negatives))
    if not positives:
        raise ShieldTrainingError("Cannot train a parametric shield without catastrophic pairs")
    overlap = set(positives) & set(negatives)
    if overlap:
        raise ShieldTrainingError(f"{len(overlap)} key(s) are labelled both safe and catastrophic")

    featurize = feature_fn or key_features
    unsafe_x = np.stack([featurize(key, action_count) for key in positives])
    safe_x = (
        np.stack([featurize(key, action_count) for key in negatives])
        if negatives else np.zeros((0, unsafe_x.shape[1]))
    )

    curvature = 0.25 * float(np.mean(np.sum(unsafe_x ** 2, axis=1) + 1.0))
    if len(safe_x):
        curvature += 0.25 * float(np.mean(np.sum(safe_x ** 2, axis=1) + 1.0))
    step = min(learning_rate, 1.0 / curvature)
    if step < learning_rate:
        logger.debug(f"Parametric shield step clamped from {learning_rate} to {step:.4g}")

    theta = np.zeros(unsafe_x.shape[1] + 1)
    history = []
    for _ in range(epochs):
        loss, grad = parametric_loss_and_grad(theta, unsafe_x, safe_x)
        history.append(loss)
        theta -= step * grad
    final_loss, _ = parametric_loss_and_grad(theta, unsafe_x, safe_x)
    history.append(final_loss)

    shield = ParametricShield(
        theta[:-1], theta[-1], action_count,
        threshold=threshold, positive_count=len(positives), feature_fn=feature_fn,
    )
    shield.loss_history = history
    logger.info(
        f"Parametric shield trained on {len(positives)} unsafe / {len(negatives)} safe pairs, "
        f"loss {history[0]:.4f} -> {history[-1]:.4f}"
    )
    return shield


class SafeExperienceReservoir:
    """Échantillon uniforme (algorithme R) des paires exécutées sans incident"""

    def __init__(self, capacity: int, rng: np.random.Generator):
        self.capacity = capacity
        self.rng = rng
        self.seen = 0
        self.keys: List[ShieldKey] = []

    def add(self, key: ShieldKey) -> None:
        self.seen += 1
        if len(self.keys) < self.capacity:
            self.keys.append(key)
            return
        slot = int(self.rng.integers(0, self.seen))
        if slot < self.capacity:
            self.keys[slot] = key


def apply_shield(policy_probs, mask, default_policy) -> np.ndarray:
    """
    Applique un bouclier à une distribution d'actions.

    pi'(a) = pi(a) S(a) / Z si au moins une action est sûre, sinon la
    politique par défaut. Si la politique ne met aucune masse sur les actions
    sûres (Z = 0), on prend l'uniforme sur les actions sûres.
    """
    probs = np.asarray(policy_probs, dtype=np.float64)
    safe = np.asarray(mask) != 0
    default = np.asarray(default_policy, dtype=np.float64)
    if probs.shape != safe.shape or probs.shape != default.shape:
        raise ValueError("policy_probs, mask and default_policy must have the same length")
    if np.any(probs < 0.0):
        raise ValueError("policy_probs must be non-negative")

    if not safe.any():
        return default.copy()
    if safe.all():
        return probs.copy()

    shielded = np.where(safe, probs, 0.0)
    z = shielded.sum()
    if z <= 0.0:
        shielded = safe.astype(np.float64)
        z = shielded.sum()
    return shielded / z


class _Reader:
    """Curseur de lecture qui rapporte l'offset de toute erreur de format"""

    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if size < 0 or end > len(self.data):
            raise ShieldFormatError(
                f"Truncated stream while reading {what} ({size} bytes needed, "
                f"{len(self.data) - self.offset} left)",
                self.offset,
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def keys(self, count: int) -> List[ShieldKey]:
        if count * SHIELD_KEY_SIZE > len(self.data) - self.offset:
            raise ShieldFormatError(f"Truncated stream: {count} keys announced", self.offset)
        keys = []
        for _ in range(count):
            start = self.offset
            raw = self.take(SHIELD_KEY_SIZE, 'shield key')
            try:
                keys.append(ShieldKey.from_bytes(raw))
            except (StateKeyFormatError, ValueError) as exc:
                raise ShieldFormatError(f"Invalid shield key: {exc}", start) from exc
        return keys

    def finish(self) -> None:
        if self.offset != len(self.data):
            raise ShieldFormatError(
                f"{len(self.data) - self.offset} trailing bytes after payload", self.offset
            )


def serialize(shield: Shield) -> bytes:
    return shield.serialize()


def deserialize(data: bytes) -> Shield:
    """
    Reconstruit un bouclier depuis son flux binaire

    Le format ne porte que l'état utile aux requêtes : un filtre de Bloom
    relu perd son target_fp de dimensionnement (m, k et n suffisent au taux
    attendu) et un bouclier paramétrique repasse sur key_features.
    """
    reader = _Reader(data)
    magic, version, variant = reader.unpack('<4sHB', 'header')
    if magic != SHIELD_MAGIC:
        raise ShieldFormatError(f"Bad magic {magic!r}", 0)
    if version != SHIELD_FORMAT_VERSION:
        raise ShieldFormatError(f"Unsupported shield format version {version}", 4)

    if variant == VARIANT_TABULAR:
        (count,) = reader.unpack('<Q', 'entry count')
        shield = TabularShield(reader.keys(count))
    elif variant == VARIANT_BOUNDED:
        capacity, count = reader.unpack('<QQ', 'bounded header')
        if capacity < 1 or count > capacity:
            raise ShieldFormatError(f"Bounded shield holds {count} keys for capacity {capacity}", reader.offset - 16)
        shield = BoundedShield(capacity)
        for key in reader.keys(count):
            shield.record(key)
    elif variant == VARIANT_BLOOM:
        m, k, n = reader.unpack('<QQQ', 'bloom header')
        if m < 1 or k < 1:
            raise ShieldFormatError("Bloom filter with m or k equal to zero", reader.offset - 24)
        shield = BloomShield(m, k)
        shield.bits = bytearray(reader.take((m + 7) // 8, 'bloom bit array'))
        shield.n = n
    elif variant == VARIANT_PARAMETRIC:
        action_count, threshold, positive_count, size = reader.unpack('<BdQQ', 'parametric header')
        weights = np.frombuffer(reader.take(8 * size, 'weights'), dtype='<f8').astype(np.float64)
        (bias,) = reader.unpack('<d', 'bias')
        try:
            shield = ParametricShield(weights, bias, action_count, threshold, positive_count)
        except ValueError as exc:
            raise ShieldFormatError(str(exc), reader.offset) from exc
    else:
        raise ShieldFormatError(f"Unknown shield variant tag {variant}", 6)

    reader.finish()
    return shield


def write_shield(shield: Shield, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(shield.serialize())
    return path


def read_shield(path) -> Shield:
    return deserialize(Path(path).read_bytes())


def merge_shields(shields: Sequence[Shield]) -> TabularShield:
    """Union de boucliers tabulaires"""
    merged = TabularShield()
    for shield in shields:
        if not isinstance(shield, TabularShield):
            raise ShieldMergeError(
                f"Only tabular shields can be merged, got a {shield.variant_name} shield"
            )
        for key in shield.entries():
            merged.record(key)
    return merged


def build_shield(variant: str, capacity: int = 1024, expected_n: int = 10_000, target_fp: float = 0.01) -> Shield:
    if variant == 'tabular':
        return TabularShield()
    if variant == 'bounded':
        return BoundedShield(capacity)
    if variant == 'bloom':
        return BloomShield.for_capacity(expected_n, target_fp)
    raise ShieldError(f"Cannot build an online shield of variant '{variant}'")


def describe_shield(shield: Shield, limit: int = 20) -> Dict:
    """Résumé lisible d'un bouclier (shield-inspect, API)"""
    summary = {
        'variant': shield.variant_name,
        'entries': len(shield),
    }
    if isinstance(shield, (TabularShield, BoundedShield)):
        summary['keys'] = [key.describe() for key in shield.entries()[:limit]]
    if isinstance(shield, BoundedShield):
        summary['capacity'] = shield.capacity
    if isinstance(shield, BloomShield):
        summary.update({
            'm': shield.m,
            'k': shield.k,
            'n': shield.n,
            'expected_fp_rate': shield.expected_fp_rate(),
        })
    if isinstance(shield, ParametricShield):
        summary.update({
            'feature_size': int(shield.weights.size),
            'threshold': shield.threshold,
            'action_count': shield.action_count,
        })
    return summary
