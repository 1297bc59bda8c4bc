"""Exceptions du harnais d'expériences"""


class ExperimentError(Exception):
    """Erreur de base du harnais"""


class ConfigError(ExperimentError):
    """Configuration invalide ; ``line`` est la ligne fautive du fichier (None pour --set)"""

    def __init__(self, message: str, line: int = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class AggregationError(ExperimentError):
    """Artefacts impossibles à agréger"""
