from django.apps import AppConfig
from django.utils.translation import gettext_lazy as _


class DycafConfig(AppConfig):
    name = 'dycaf'
    verbose_name = _('DyCAF numerical harness')
    default_auto_field = 'django.db.models.AutoField'
