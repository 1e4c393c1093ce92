"""Kernel backend selection and thread control.

Hot numeric kernels exist in two variants: numba ``@njit`` loops
(``kernels.numba_backend``) and pure-numpy array code
(``kernels.numpy_backend``). The active variant is chosen once per call via
:func:`active_backend`:

* ``REFRACTA_BACKEND=numpy`` forces the vectorized numpy path,
* ``REFRACTA_BACKEND=numba`` forces the jit path (raises if numba is absent),
* unset: numba when importable, else numpy.

``set_backend`` overrides the environment for the current process (used by
tests and the benchmark). Thread counts only affect the numba path; outputs
are bit-identical across thread counts because every parallel loop writes
disjoint per-item results and reductions happen afterwards in numpy.
"""

import os

from .errors import ConfigError

_BACKEND_OVERRIDE = None

try:
    import numba  # noqa: F401

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, but stay importable
    _HAVE_NUMBA = False


def available_backends():
    return ("numba", "numpy") if _HAVE_NUMBA else ("numpy",)


def set_backend(name):
    """Force a backend for this process; ``None`` restores env/default selection."""
    global _BACKEND_OVERRIDE
    if name is not None and name not in ("numba", "numpy"):
        raise ConfigError(f"unknown backend {name!r}, expected 'numba' or 'numpy'")
    if name == "numba" and not _HAVE_NUMBA:
        raise ConfigError("numba backend requested but numba is not importable")
    _BACKEND_OVERRIDE = name


def active_backend():
    if _BACKEND_OVERRIDE is not None:
        return _BACKEND_OVERRIDE
    env = os.environ.get("REFRACTA_BACKEND", "").strip().lower()
    if env in ("numba", "numpy"):
        if env == "numba" and not _HAVE_NUMBA:
            raise ConfigError("REFRACTA_BACKEND=numba but numba is not importable")
        return env
    if env:
        raise ConfigError(f"REFRACTA_BACKEND={env!r} not understood (use 'numba' or 'numpy')")
    return "numba" if _HAVE_NUMBA else "numpy"


def get_kernels(backend=None):
    """Return the kernel namespace for ``backend`` (default: active backend)."""
    name = backend or active_backend()
    if name == "numba":
        from .kernels import numba_backend as impl
    else:
        from .kernels import numpy_backend as impl
    return impl


def set_threads(n):
    """Cap the numba worker pool at ``n`` threads (clamped to what exists)."""
    if n is None:
        return
    n = int(n)
    if n < 1:
        raise ConfigError(f"thread count must be >= 1, got {n}")
    if _HAVE_NUMBA:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def thread_count_from_env(flag_value=None):
    """Resolve a thread count: explicit flag wins, then REFRACTA_THREADS."""
    if flag_value is not None:
        return int(flag_value)
    env = os.environ.get("REFRACTA_THREADS")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"REFRACTA_THREADS={env!r} is not an integer") from exc
    return None
