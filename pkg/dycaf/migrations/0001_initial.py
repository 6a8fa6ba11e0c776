# -*- coding: utf-8 -*-
from django.db import models, migrations
import django.core.serializers.json
import django.utils.timezone


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='RunRecord',
            fields=[
                ('id', models.AutoField(verbose_name='ID', serialize=False, auto_created=True, primary_key=True)),
                ('command', models.CharField(max_length=20, verbose_name='command')),
                ('seed', models.BigIntegerField(default=0, verbose_name='seed')),
                ('passed', models.BooleanField(default=False, verbose_name='passed')),
                ('schema_version', models.PositiveIntegerField(verbose_name='schema version')),
                ('created_on', models.DateTimeField(default=django.utils.timezone.now, verbose_name='created on')),
                ('report', models.JSONField(encoder=django.core.serializers.json.DjangoJSONEncoder, verbose_name='report')),
            ],
            options={
                'verbose_name': 'run record',
                'verbose_name_plural': 'run records',
                'ordering': ('-created_on',),
            },
        ),
    ]
