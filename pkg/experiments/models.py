from django.db import models
from django.core.validators import MinValueValidator, MaxValueValidator
import uuid


class ExperimentRun(models.Model):
    """Run archivé : une configuration et une graine"""

    PROTOCOL_CHOICES = [
        ('single', 'Agent unique'),
        ('multi', 'Multi-agents'),
        ('goal', 'Conditionné par le but'),
    ]

    id = models.UUIDField(primary_key=True, default=uuid.uuid4, editable=False)
    name = models.CharField(max_length=100)
    protocol = models.CharField(max_length=10, choices=PROTOCOL_CHOICES)
    seed = models.BigIntegerField()
    config = models.JSONField(help_text="Instantané complet de la configuration")
    config_digest = models.CharField(max_length=64, db_index=True, help_text="SHA-256 de la configuration hors graines")

    episode_count = models.PositiveIntegerField(default=0)
    total_steps = models.PositiveIntegerField(default=0)
    total_mistakes = models.PositiveIntegerField(default=0)
    repeated_mistakes = models.PositiveIntegerField(default=0)
    wall_clock_seconds = models.FloatField(default=0.0)

    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at', 'seed']

    def __str__(self):
        return f"{self.name} [{self.protocol}] seed={self.seed}"

    @property
    def mistake_rate(self):
        if not self.total_steps:
            return 0.0
        return self.total_mistakes / self.total_steps


class EpisodeMetric(models.Model):
    """Une ligne de métriques par épisode d'entraînement"""

    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name='metrics')
    episode = models.PositiveIntegerField()
    mean_return = models.FloatField()
    mistake_count = models.PositiveIntegerField(default=0)
    step_count = models.PositiveIntegerField(default=0)
    mistake_rate = models.FloatField(
        validators=[MinValueValidator(0.0), MaxValueValidator(1.0)],
        help_text="Erreurs cumulées / pas cumulés"
    )
    repeated_mistake_count = models.PositiveIntegerField(default=0)
    goal_count = models.PositiveIntegerField(default=0)

    class Meta:
        ordering = ['run', 'episode']
        unique_together = ['run', 'episode']

    def __str__(self):
        return f"{self.run_id} episode {self.episode}"
