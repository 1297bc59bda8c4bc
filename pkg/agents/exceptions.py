"""Exceptions des agents d'apprentissage"""


class AgentError(Exception):
    """Erreur de base des agents"""


class NumericalError(AgentError):
    """Valeur non finie dans le réseau ; ``dump`` contient le diagnostic"""

    def __init__(self, message: str, dump: dict = None):
        super().__init__(message)
        self.dump = dump or {}


class CheckpointFormatError(AgentError):
    """Fichier de paramètres illisible"""
