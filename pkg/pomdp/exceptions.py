"""Exceptions du contrat POMDP-CA"""


class PomdpError(Exception):
    """Erreur de base des environnements"""


class EpisodeTerminatedError(PomdpError):
    """step() appelé sur un épisode déjà terminé"""


class InvalidActionError(PomdpError):
    """Action hors de l'ensemble d'actions de l'environnement"""


class StateKeyFormatError(PomdpError):
    """Clé d'état dont la taille ou la version ne correspond pas au format"""
