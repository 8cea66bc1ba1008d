"""Selects the compiled kernels when available, else the Python fallback.

Set ``MIGPERF_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if not os.environ.get("MIGPERF_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

MAX_COMPILED_SLICES = 63


def search_placement(sizes, starts, same_as_prev, total):
    impl = _impl if total <= MAX_COMPILED_SLICES else _kernels_py
    return impl.search_placement(sizes, starts, same_as_prev, total)


def enumerate_configs(sizes, starts, max_counts, total):
    impl = _impl if total <= MAX_COMPILED_SLICES else _kernels_py
    return impl.enumerate_configs(sizes, starts, max_counts, total)


def _plain(values):
    # the Python loops are far faster over lists than over numpy scalars
    return values.tolist() if hasattr(values, "tolist") else values


def fifo_completions(arrivals, services):
    if _impl is _kernels_py:
        arrivals, services = _plain(arrivals), _plain(services)
    return _impl.fifo_completions(arrivals, services)


def busy_fractions(busy_starts, busy_ends, interval, n_bins):
    if _impl is _kernels_py:
        busy_starts, busy_ends = _plain(busy_starts), _plain(busy_ends)
    return _impl.busy_fractions(busy_starts, busy_ends, float(interval), n_bins)
