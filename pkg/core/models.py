from django.db import models
import uuid


class RunManifest(models.Model):
    COMMAND_CHOICES = [
        ('solve', 'Mean field solve'),
        ('experiment', 'Monte Carlo experiment'),
        ('trade', 'Trading simulation / learning'),
    ]
    STATUS_CHOICES = [
        ('ok', 'Completed'),
        ('unstable', 'Completed, stability margins not positive'),
        ('failed', 'Failed'),
    ]

    id = models.UUIDField(primary_key=True, default=uuid.uuid4, editable=False)
    command = models.CharField(max_length=20, choices=COMMAND_CHOICES)
    kind = models.CharField(max_length=50, blank=True, default='')
    spec_path = models.CharField(max_length=500)
    overrides = models.JSONField(default=dict)
    seed = models.PositiveBigIntegerField(null=True, blank=True)
    output_dir = models.CharField(max_length=500)
    tool_version = models.CharField(max_length=20)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='ok')
    summary = models.JSONField(default=dict)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        label = f"{self.command}:{self.kind}" if self.kind else self.command
        return f"{label} -> {self.output_dir}"
