from django.db import migrations, models
import django.db.models.deletion
import uuid


class Migration(migrations.Migration):

    initial = True

    dependencies = [
        ('experiments', '0001_initial'),
    ]

    operations = [
        migrations.CreateModel(
            name='StoredShield',
            fields=[
                ('id', models.UUIDField(default=uuid.uuid4, editable=False, primary_key=True, serialize=False)),
                ('name', models.CharField(help_text='shared, agent-3, parametric...', max_length=50)),
                ('variant', models.CharField(choices=[('tabular', 'Table exacte'), ('bounded', 'Table bornée (LRU)'), ('bloom', 'Filtre de Bloom'), ('parametric', 'Classifieur paramétrique')], max_length=15)),
                ('entry_count', models.PositiveIntegerField(default=0)),
                ('payload', models.BinaryField()),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='shields', to='experiments.experimentrun')),
            ],
            options={
                'ordering': ['run', 'name'],
                'unique_together': {('run', 'name')},
            },
        ),
    ]
