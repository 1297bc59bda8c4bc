"""
Contrat POMDP-CA commun à tous les environnements du workbench.

Un environnement expose reset/step/state_key/observe. Chaque transition porte,
en plus de la récompense, l'étiquette de sécurité u = L_phi(s, a) (1 = sûr)
ainsi que la clé canonique de l'état de départ, utilisée par les boucliers.
"""
import logging
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, Optional, Set, Tuple

import numpy as np

from .exceptions import EpisodeTerminatedError, InvalidActionError, StateKeyFormatError

logger = logging.getLogger(__name__)

# Format binaire de StateKey (version 1, little-endian, 12 octets) :
#   u8 version | u8 env_tag | u32 instance | u16 x | u16 y | u8 facing | u8 goal
STATE_KEY_VERSION = 1
_STATE_KEY_STRUCT = struct.Struct('<BBIHHBB')
STATE_KEY_SIZE = _STATE_KEY_STRUCT.size

ENV_TAG_CHAIN = 1
ENV_TAG_LAVAGRID = 2

# Alphabet des cases de la fenêtre d'observation
CELL_OUT_OF_BOUNDS = 0
CELL_FLOOR = 1
CELL_WALL = 2
CELL_CODE_COUNT = 3

WINDOW_SIZE = 5

SAFE = 1
UNSAFE = 0

_UINT64_MASK = (1 << 64) - 1


@dataclass(frozen=True, order=True)
class StateKey:
    """Encodage canonique, à largeur fixe, d'un état discret"""

    data: bytes

    def __post_init__(self):
        if len(self.data) != STATE_KEY_SIZE:
            raise StateKeyFormatError(
                f"State key must be {STATE_KEY_SIZE} bytes, got {len(self.data)}"
            )
        if self.data[0] != STATE_KEY_VERSION:
            raise StateKeyFormatError(f"Unsupported state key version {self.data[0]}")

    @classmethod
    def pack(cls, env_tag: int, instance: int, x: int, y: int, facing: int = 0, goal: int = 0) -> 'StateKey':
        return cls(_STATE_KEY_STRUCT.pack(STATE_KEY_VERSION, env_tag, instance, x, y, facing, goal))

    @classmethod
    def from_bytes(cls, data: bytes) -> 'StateKey':
        return cls(bytes(data))

    def to_bytes(self) -> bytes:
        return self.data

    def unpack(self) -> Dict[str, int]:
        _, env_tag, instance, x, y, facing, goal = _STATE_KEY_STRUCT.unpack(self.data)
        return {
            'env_tag': env_tag,
            'instance': instance,
            'x': x,
            'y': y,
            'facing': facing,
            'goal': goal,
        }

    def __repr__(self):
        fields = self.unpack()
        return (
            f"StateKey(env={fields['env_tag']}, instance={fields['instance']}, "
            f"pos=({fields['x']},{fields['y']}), facing={fields['facing']}, goal={fields['goal']})"
        )


@dataclass(frozen=True, eq=False)
class Observation:
    """
    Observation déterministe d'un état.

    window : grille 5x5 de codes de cases, rangée 0 = la plus éloignée,
             l'agent occupe la case centrale de la dernière rangée
    goal_delta : décalage signé vers le but (avant, droite)
    instance_onehot : identité (regroupée) de l'instance courante
    """

    window: np.ndarray
    goal_delta: Tuple[int, int]
    instance_onehot: np.ndarray

    def __post_init__(self):
        if self.window.shape != (WINDOW_SIZE, WINDOW_SIZE):
            raise ValueError(f"Observation window must be {WINDOW_SIZE}x{WINDOW_SIZE}")
        if np.count_nonzero(self.instance_onehot) != 1:
            raise ValueError("instance_onehot must have exactly one nonzero entry")
        if self.window.min() < 0 or self.window.max() >= CELL_CODE_COUNT:
            raise ValueError("Observation window contains an unknown cell code")

    @property
    def instance_index(self) -> int:
        return int(np.argmax(self.instance_onehot))

    def to_bytes(self) -> bytes:
        head = struct.pack('<ii', *self.goal_delta)
        return (
            self.window.astype(np.uint8).tobytes()
            + head
            + self.instance_onehot.astype(np.uint8).tobytes()
        )

    def __eq__(self, other):
        if not isinstance(other, Observation):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    def __hash__(self):
        return hash(self.to_bytes())


@dataclass(frozen=True)
class Transition:
    state_key: StateKey
    obs: Observation
    action: int
    reward: float
    next_obs: Observation
    terminal: bool
    safety_label: int
    truncated: bool = False
    reached_goal: bool = False

    @property
    def is_mistake(self) -> bool:
        return self.safety_label == UNSAFE

    @property
    def episode_over(self) -> bool:
        return self.terminal or self.truncated


@dataclass(frozen=True)
class EnvSpec:
    action_count: int
    discount: float
    window_size: int = WINDOW_SIZE
    cell_code_count: int = CELL_CODE_COUNT
    instance_count: int = 1
    goal_scale: Tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.action_count < 2:
            raise ValueError("action_count must be at least 2")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        if self.instance_count < 1:
            raise ValueError("instance_count must be at least 1")

    @property
    def feature_size(self) -> int:
        """Taille du vecteur d'observation aplati (one-hot des cases, but, instance)"""
        return self.window_size * self.window_size * self.cell_code_count + 2 + self.instance_count


def normalize_seed(seed: int) -> int:
    """Ramène n'importe quelle graine 64 bits (signée ou non) dans [0, 2**64)"""
    return int(seed) & _UINT64_MASK


class PomdpEnvironment(ABC):
    """
    Environnement POMDP-CA à propriétaire unique.

    Les sous-classes implémentent _start, _advance, state_key et observe ;
    la classe de base gère les gardes du contrat (épisode terminé, action
    invalide) et la troncature éventuelle par nombre de pas.
    """

    def __init__(self, spec: EnvSpec, max_steps: Optional[int] = None):
        self.spec = spec
        self.max_steps = max_steps
        self.rng = np.random.default_rng(0)
        self.steps_taken = 0
        self._done = True

    @property
    def done(self) -> bool:
        return self._done

    def reset(self, seed: int) -> Observation:
        self.rng = np.random.default_rng(normalize_seed(seed))
        self.steps_taken = 0
        self._done = False
        self._start()
        return self.observe()

    def step(self, action: int) -> Transition:
        if self._done:
            raise EpisodeTerminatedError("step() called on a finished episode; call reset() first")
        action = int(action)
        if not 0 <= action < self.spec.action_count:
            raise InvalidActionError(
                f"Action {action} outside [0, {self.spec.action_count})"
            )

        key = self.state_key()
        obs = self.observe()
        reward, terminal, safety_label, reached_goal = self._advance(action)
        self.steps_taken += 1

        truncated = False
        if not terminal and self.max_steps is not None and self.steps_taken >= self.max_steps:
            truncated = True
        self._done = terminal or truncated

        return Transition(
            state_key=key,
            obs=obs,
            action=action,
            reward=float(reward),
            next_obs=self.observe(),
            terminal=terminal,
            safety_label=safety_label,
            truncated=truncated,
            reached_goal=reached_goal,
        )

    @abstractmethod
    def _start(self) -> None:
        """Place l'environnement dans son état initial (RNG déjà réinitialisé)"""

    @abstractmethod
    def _advance(self, action: int) -> Tuple[float, bool, int, bool]:
        """Applique l'action ; retourne (récompense, terminal, étiquette, but atteint)"""

    @abstractmethod
    def state_key(self) -> StateKey:
        """Clé canonique de l'état courant"""

    @abstractmethod
    def observe(self) -> Observation:
        """Observation de l'état courant"""


class ChainEnvironment(PomdpEnvironment):
    """
    Chaîne s_1 -> s_2 -> ... -> s_n : toute action avance d'un état.

    Atteindre s_n est une catastrophe (-1000, fin d'épisode), mais l'erreur
    réelle est l'action qui engage l'agent dans la chaîne, c'est-à-dire
    l'action prise depuis s_1 : c'est la seule paire étiquetée 0.
    """

    CRASH_REWARD = -1000.0

    def __init__(self, n: int = 4, discount: float = 0.99, max_steps: Optional[int] = None):
        if n < 2:
            raise ValueError("A chain needs at least two states")
        super().__init__(EnvSpec(action_count=2, discount=discount, goal_scale=(n, 1)), max_steps)
        self.n = n
        self.position = 1

    def _start(self) -> None:
        self.position = 1

    def _advance(self, action: int) -> Tuple[float, bool, int, bool]:
        safety_label = UNSAFE if self.position == 1 else SAFE
        self.position += 1
        if self.position >= self.n:
            return self.CRASH_REWARD, True, safety_label, False
        return 0.0, False, safety_label, False

    def state_key(self) -> StateKey:
        return StateKey.pack(ENV_TAG_CHAIN, 0, self.position, 0)

    def observe(self) -> Observation:
        window = np.full((WINDOW_SIZE, WINDOW_SIZE), CELL_FLOOR, dtype=np.int8)
        return Observation(
            window=window,
            goal_delta=(self.n - self.position, 0),
            instance_onehot=np.ones(1, dtype=np.int8),
        )

    def catastrophic_pairs(self) -> Set[Tuple[StateKey, int]]:
        first = StateKey.pack(ENV_TAG_CHAIN, 0, 1, 0)
        return {(first, action) for action in range(self.spec.action_count)}
