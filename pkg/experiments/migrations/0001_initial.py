from django.db import migrations, models
import django.core.validators
import django.db.models.deletion
import uuid


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.UUIDField(default=uuid.uuid4, editable=False, primary_key=True, serialize=False)),
                ('name', models.CharField(max_length=100)),
                ('protocol', models.CharField(choices=[('single', 'Agent unique'), ('multi', 'Multi-agents'), ('goal', 'Conditionné par le but')], max_length=10)),
                ('seed', models.BigIntegerField()),
                ('config', models.JSONField(help_text='Instantané complet de la configuration')),
                ('config_digest', models.CharField(db_index=True, help_text='SHA-256 de la configuration hors graines', max_length=64)),
                ('episode_count', models.PositiveIntegerField(default=0)),
                ('total_steps', models.PositiveIntegerField(default=0)),
                ('total_mistakes', models.PositiveIntegerField(default=0)),
                ('repeated_mistakes', models.PositiveIntegerField(default=0)),
                ('wall_clock_seconds', models.FloatField(default=0.0)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'ordering': ['-created_at', 'seed'],
            },
        ),
        migrations.CreateModel(
            name='EpisodeMetric',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('episode', models.PositiveIntegerField()),
                ('mean_return', models.FloatField()),
                ('mistake_count', models.PositiveIntegerField(default=0)),
                ('step_count', models.PositiveIntegerField(default=0)),
                ('mistake_rate', models.FloatField(help_text='Erreurs cumulées / pas cumulés', validators=[django.core.validators.MinValueValidator(0.0), django.core.validators.MaxValueValidator(1.0)])),
                ('repeated_mistake_count', models.PositiveIntegerField(default=0)),
                ('goal_count', models.PositiveIntegerField(default=0)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='metrics', to='experiments.experimentrun')),
            ],
            options={
                'ordering': ['run', 'episode'],
                'unique_together': {('run', 'episode')},
            },
        ),
    ]
