"""
Django settings for the dp_defence project.

The project has no web surface: Django provides the management-command CLI,
the test runner and the logging setup. Everything environment-specific is
read through python-decouple so a `.env` file or plain environment
variables can override it.
"""
from pathlib import Path
from decouple import config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


SECRET_KEY = config('DP_DEFENCE_SECRET_KEY', default='dp-defence-local-only')

DEBUG = config('DP_DEFENCE_DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = []


INSTALLED_APPS = [
    'rest_framework',

    # custom apps
    'fence',
]

# Pipelines are file based; nothing is persisted in a database.
DATABASES = {}

USE_TZ = True

TIME_ZONE = 'UTC'


# Worker threads for patch, disparity-plane and sample parallelism.
# `--threads` on any subcommand takes precedence.
FENCE_THREADS = config('DP_DEFENCE_THREADS', default=1, cast=int)

# Schema version stamped into manifests and reports.
FENCE_SCHEMA_VERSION = 1

HYPOTHESIS_PROFILE = config('DP_DEFENCE_HYPOTHESIS_PROFILE', default='default')


LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'fence': {
            'handlers': ['console'],
            'level': config('DP_DEFENCE_LOG_LEVEL', default='INFO'),
            'propagate': False,
        },
    },
}
