# Generated by Django 5.2.8 on 2026-10-17 09:14

import uuid
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='RunManifest',
            fields=[
                ('id', models.UUIDField(default=uuid.uuid4, editable=False, primary_key=True, serialize=False)),
                ('command', models.CharField(choices=[('solve', 'Mean field solve'), ('experiment', 'Monte Carlo experiment'), ('trade', 'Trading simulation / learning')], max_length=20)),
                ('kind', models.CharField(blank=True, default='', max_length=50)),
                ('spec_path', models.CharField(max_length=500)),
                ('overrides', models.JSONField(default=dict)),
                ('seed', models.PositiveBigIntegerField(blank=True, null=True)),
                ('output_dir', models.CharField(max_length=500)),
                ('tool_version', models.CharField(max_length=20)),
                ('status', models.CharField(choices=[('ok', 'Completed'), ('unstable', 'Completed, stability margins not positive'), ('failed', 'Failed')], default='ok', max_length=20)),
                ('summary', models.JSONField(default=dict)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
    ]
