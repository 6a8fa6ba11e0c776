# -*- coding: utf-8 -*-
from django.core.serializers.json import DjangoJSONEncoder
from django.db import models
from django.utils import timezone
from django.utils.translation import gettext_lazy as _

__all__ = ['RunRecord']


class RunRecordManager(models.Manager):
    def create_from_report(self, report):
        """
        Store a finished RunReport. The JSON body is the report's own
        serialization, so the record and a written report file agree.
        """
        return self.create(
            command=report.command,
            seed=report.seed,
            passed=report.passed,
            schema_version=report.to_dict()['schema_version'],
            report=report.to_dict(),
        )

    def failed(self):
        return self.filter(passed=False)

    def latest_for(self, command):
        return self.filter(command=command).order_by('-created_on', '-id').first()


class RunRecord(models.Model):
    '''
    One harness run: which command ran with which seed, whether every check
    passed, and the full report.
    '''
    command = models.CharField(_("command"), max_length=20)
    seed = models.BigIntegerField(_("seed"), default=0)
    passed = models.BooleanField(_("passed"), default=False)
    schema_version = models.PositiveIntegerField(_("schema version"))
    created_on = models.DateTimeField(_("created on"), default=timezone.now)
    report = models.JSONField(_("report"), encoder=DjangoJSONEncoder)
    objects = RunRecordManager()

    class Meta:
        verbose_name = _('run record')
        verbose_name_plural = _('run records')
        app_label = 'dycaf'
        ordering = ('-created_on',)

    def __str__(self):
        return '%s seed=%d %s' % (self.command, self.seed, 'pass' if self.passed else 'FAIL')

    @property
    def checks(self):
        return self.report.get('checks', {})

    def failures(self):
        return [name for name, check in self.checks.items() if not check.get('passed')]
