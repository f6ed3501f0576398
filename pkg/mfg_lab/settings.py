"""
Django settings for mfg_lab project.

The project has no web surface; Django provides the management command
runner, the ORM used by the run ledger, and the test runner.

For more information on this file, see
https://docs.djangoproject.com/en/5.2/topics/settings/
"""

import os
from pathlib import Path
from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

load_dotenv()


def _env_float(name, default):
    value = os.getenv(name)
    return float(value) if value not in (None, "") else default


def _env_int(name, default):
    value = os.getenv(name)
    return int(value) if value not in (None, "") else default


def _env_bool(name, default):
    value = os.getenv(name)
    if value in (None, ""):
        return default
    return value.strip().lower() in ("1", "true", "yes", "on")


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.getenv("SECRET_KEY", "django-insecure-mfg-lab-local-only")

DEBUG = _env_bool("DEBUG", False)

ALLOWED_HOSTS = [h for h in os.getenv("ALLOWED_HOSTS", "").split(",") if h]


# Application definition

INSTALLED_APPS = [
    'django.contrib.auth',
    'django.contrib.contenttypes',
    'rest_framework',
    'core',
    'games',
    'solver',
    'policies',
    'simulation',
    'trading',
]

MIDDLEWARE = []


# Database
# https://docs.djangoproject.com/en/5.2/ref/settings/#databases

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': os.getenv("MFG_DATABASE", BASE_DIR / 'db.sqlite3'),
    }
}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# Default primary key field type
# https://docs.djangoproject.com/en/5.2/ref/settings/#default-auto-field

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# --- Logging ---
LOG_LEVEL = os.getenv("MFG_LOG_LEVEL", "INFO").upper()

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '%(asctime)s %(levelname)s %(name)s %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': 'WARNING',
    },
    'loggers': {
        app: {'handlers': ['console'], 'level': LOG_LEVEL, 'propagate': False}
        for app in ('core', 'games', 'solver', 'policies', 'simulation', 'trading')
    },
}


# --- Solver / simulation defaults ---
MFG_OUTPUT_DIR = Path(os.getenv("MFG_OUTPUT_DIR", BASE_DIR / "runs"))
MFG_RECORD_RUNS = _env_bool("MFG_RECORD_RUNS", True)

MFG_SOLVER = {
    'tol': _env_float("MFG_SOLVER_TOL", 1e-10),
    'damping': _env_float("MFG_SOLVER_DAMPING", 0.5),
    'max_iters': _env_int("MFG_SOLVER_MAX_ITERS", 500),
    'dt': _env_float("MFG_SOLVER_DT", 0.01),
    'max_horizon': _env_float("MFG_SOLVER_MAX_HORIZON", 400.0),
}

MFG_SIMULATION = {
    'seed': _env_int("MFG_SEED", 20240607),
    'dt': _env_float("MFG_SIM_DT", 0.01),
    'horizon': _env_float("MFG_SIM_HORIZON", 10.0),
    'reps': _env_int("MFG_REPS", 64),
    'Ns': [16, 64, 256, 1024],
    'lambdas': [1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6],
}

MFG_TRADING = {
    'traders': _env_int("MFG_TRADERS", 20),
    'episodes': _env_int("MFG_EPISODES", 5),
    'steps': _env_int("MFG_EPISODE_STEPS", 200),
    'iterations': _env_int("MFG_RL_ITERATIONS", 5),
}
