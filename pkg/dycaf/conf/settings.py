import os

from django.conf import settings
from django.core.exceptions import ImproperlyConfigured

# Worker cap for per-level solves and threaded benchmarks. 0 means one worker
# per CPU. The environment variable wins over nothing, the Django setting wins
# over the environment.
try:
    threads = getattr(settings, 'DYCAF_THREADS', os.environ.get('DYCAF_THREADS', 0))
    THREADS = int(threads or 0)
except ValueError:
    raise ImproperlyConfigured("DYCAF_THREADS must be a non-negative integer")
if THREADS < 0:
    raise ImproperlyConfigured("DYCAF_THREADS must be a non-negative integer")

PROTOTYPE_DIM = int(getattr(settings, 'DYCAF_PROTOTYPE_DIM', 256))

# hidden width of the per-pixel MLP behind dynamic GAP
GAP_HIDDEN = int(getattr(settings, 'DYCAF_GAP_HIDDEN', 512))

SQUEEZE_RATIO = int(getattr(settings, 'DYCAF_SQUEEZE_RATIO', 16))
if SQUEEZE_RATIO < 1:
    raise ImproperlyConfigured("DYCAF_SQUEEZE_RATIO must be at least 1")

GRADCHECK_TOLERANCE = float(getattr(settings, 'DYCAF_GRADCHECK_TOLERANCE', 1e-4))
GRADCHECK_EXPLICIT_TOLERANCE = float(getattr(settings, 'DYCAF_GRADCHECK_EXPLICIT_TOLERANCE', 1e-5))
GRADCHECK_EPS = float(getattr(settings, 'DYCAF_GRADCHECK_EPS', 1e-6))
if GRADCHECK_EPS <= 0:
    raise ImproperlyConfigured("DYCAF_GRADCHECK_EPS must be positive")

REPORT_SCHEMA_VERSION = int(getattr(settings, 'DYCAF_REPORT_SCHEMA_VERSION', 1))

# entries of attention maps below this value are clamped inside the KL log
KL_CLAMP = float(getattr(settings, 'DYCAF_KL_CLAMP', 1e-12))


def worker_count(requested=None):
    """
    Resolve a thread count the way ``DYCAF_THREADS`` documents it: ``None``
    falls back to the setting, 0 means one worker per CPU.
    """
    if requested is None:
        requested = THREADS
    if requested <= 0:
        return os.cpu_count() or 1
    return requested
