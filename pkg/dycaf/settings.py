# Django settings for running dycaf standalone (management command and tests).
import os

PROJECT_PATH = os.path.realpath(os.path.dirname(__file__))

DEBUG = True

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': os.environ.get('DYCAF_DB', 'dycaf.db'),
    }
}

ALLOWED_HOSTS = []

TIME_ZONE = 'UTC'
LANGUAGE_CODE = 'en-us'
USE_I18N = True
USE_TZ = True

# Make this unique, and don't share it with anybody.
SECRET_KEY = 'dycaf-harness-not-a-secret'

INSTALLED_APPS = (
    'django.contrib.contenttypes',
    'dycaf',
)

DEFAULT_AUTO_FIELD = 'django.db.models.AutoField'

# Solver iterations are logged at DEBUG; raise the dycaf level to see them.
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '%(levelname)s %(asctime)s %(module)s %(process)d %(thread)d %(message)s'
        },
        'simple': {
            'format': '%(levelname)s %(name)s %(message)s'
        },
    },
    'handlers': {
        'console': {
            'level': 'DEBUG',
            'class': 'logging.StreamHandler',
            'formatter': 'simple'
        },
    },
    'loggers': {
        'django': {
            'handlers': ['console'],
            'propagate': True,
            'level': 'WARNING',
        },
        'dycaf': {
            'handlers': ['console'],
            'propagate': False,
            'level': os.environ.get('DYCAF_LOG_LEVEL', 'WARNING'),
        },
    }
}

TEST_RUNNER = 'django.test.runner.DiscoverRunner'

DYCAF_THREADS = int(os.environ.get('DYCAF_THREADS', 0))
