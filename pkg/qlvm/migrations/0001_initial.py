# Generated by Django 4.2.10 on 2026-10-18 10:12

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='TrainingRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('kind', models.CharField(choices=[('qlvm', 'QLVM'), ('vae', 'VAE'), ('iwae', 'IWAE')], max_length=10)),
                ('seed', models.BigIntegerField()),
                ('latent_dim', models.PositiveIntegerField()),
                ('samples', models.PositiveIntegerField(help_text='格点点数 m 或每个数据点的样本数')),
                ('epochs', models.PositiveIntegerField()),
                ('final_objective', models.FloatField()),
                ('held_out_bound', models.FloatField(blank=True, null=True)),
                ('seconds_per_epoch', models.FloatField()),
                ('checkpoint_path', models.CharField(blank=True, max_length=500)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'verbose_name': '训练记录',
                'verbose_name_plural': '训练记录',
                'ordering': ['-created_at'],
            },
        ),
    ]
