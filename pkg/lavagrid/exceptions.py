"""Exceptions de l'environnement LavaGrid"""


class LavaGridError(Exception):
    """Erreur de base de LavaGrid"""


class ScheduleCalibrationError(LavaGridError):
    """Calendrier de probabilités de lave impossible à calibrer"""


class OracleRefusedError(LavaGridError):
    """Énumération exhaustive refusée (trop d'états)"""


class InstanceFormatError(LavaGridError):
    """Enregistrement texte d'instance invalide"""

    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line
