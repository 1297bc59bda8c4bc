"""Exceptions des boucliers"""


class ShieldError(Exception):
    """Erreur de base des boucliers"""


class ShieldFormatError(ShieldError):
    """Flux binaire de bouclier invalide ; ``offset`` pointe l'octet fautif"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class ShieldTrainingError(ShieldError):
    """Données d'entraînement du bouclier paramétrique inutilisables"""


class ShieldMergeError(ShieldError):
    """Fusion de boucliers incompatibles"""
