"""Backend switch for the compiled kernels.

Hot inner loops (spline evaluation and its gradient, kernel sums for MMD,
queue and ODE simulators) exist twice: a numba ``@njit`` version in
:mod:`slfi._nb` and a pure-numpy version next to its caller. Set
``SLFI_DISABLE_NUMBA=1`` to force the numpy path; ``SLFI_THREADS`` (or the
legacy ``ISP_THREADS``) caps numba's worker count.
"""

from __future__ import annotations

import os

_FALSY = {"", "0", "false", "no", "off"}

# the bundled TBB is too old; avoid the probe warning
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")


def _numba_requested() -> bool:
    return os.environ.get("SLFI_DISABLE_NUMBA", "").strip().lower() in _FALSY


try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _numba_requested()


def use_numba() -> bool:
    return USE_NUMBA


def set_backend(numba_enabled: bool) -> None:
    """Switch backends at runtime (tests and the benchmark compare both)."""
    global USE_NUMBA
    USE_NUMBA = bool(numba_enabled) and HAVE_NUMBA


def set_threads(n: int | None) -> None:
    if n is None or not HAVE_NUMBA:
        return
    import numba

    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def threads_from_env() -> int | None:
    for key in ("SLFI_THREADS", "ISP_THREADS"):
        val = os.environ.get(key)
        if val:
            return int(val)
    return None
