import logging

from django.db import DatabaseError, models

logger = logging.getLogger(__name__)


class TrainingRun(models.Model):
    """训练运行记录"""
    KIND_CHOICES = (
        ('qlvm', 'QLVM'),
        ('vae', 'VAE'),
        ('iwae', 'IWAE'),
    )

    kind = models.CharField(max_length=10, choices=KIND_CHOICES)
    seed = models.BigIntegerField()
    latent_dim = models.PositiveIntegerField()
    samples = models.PositiveIntegerField(help_text='格点点数 m 或每个数据点的样本数')
    epochs = models.PositiveIntegerField()
    final_objective = models.FloatField()
    held_out_bound = models.FloatField(null=True, blank=True)
    seconds_per_epoch = models.FloatField()
    checkpoint_path = models.CharField(max_length=500, blank=True)
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        verbose_name = "训练记录"
        verbose_name_plural = "训练记录"
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.kind} seed={self.seed} m={self.samples} ({self.epochs} epochs)"

    @classmethod
    def record(cls, **fields):
        """写入一条记录；数据库不可用时只记警告"""
        try:
            return cls.objects.create(**fields)
        except DatabaseError as e:
            logger.warning(f"训练记录写入失败: {e}")
            return None
