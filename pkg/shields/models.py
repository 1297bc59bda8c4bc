from django.db import models
import uuid


class StoredShield(models.Model):
    """Fichier de bouclier (format SHLD) rattaché à un run archivé"""

    VARIANT_CHOICES = [
        ('tabular', 'Table exacte'),
        ('bounded', 'Table bornée (LRU)'),
        ('bloom', 'Filtre de Bloom'),
        ('parametric', 'Classifieur paramétrique'),
    ]

    id = models.UUIDField(primary_key=True, default=uuid.uuid4, editable=False)
    run = models.ForeignKey(
        'experiments.ExperimentRun',
        on_delete=models.CASCADE,
        related_name='shields'
    )
    name = models.CharField(max_length=50, help_text="shared, agent-3, parametric...")
    variant = models.CharField(max_length=15, choices=VARIANT_CHOICES)
    entry_count = models.PositiveIntegerField(default=0)
    payload = models.BinaryField()

    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['run', 'name']
        unique_together = ['run', 'name']

    def __str__(self):
        return f"{self.get_variant_display()} {self.name} ({self.entry_count} entrées)"

    def load(self):
        """Reconstruit le bouclier à partir du flux binaire"""
        from .services import deserialize
        return deserialize(bytes(self.payload))
