"""Pure-Python reference versions of the hot loops.

Every function here has a Cython twin in ``_kernels.pyx`` with the same
signature and bit-identical results; ``migperf.kernels`` picks one at import.
"""

import math


def _interval_mask(start, size):
    return ((1 << size) - 1) << start


def search_placement(sizes, starts, same_as_prev, total):
    """First (lexicographically smallest) disjoint start assignment, or None.

    ``sizes[i]``/``starts[i]`` describe item ``i``; ``same_as_prev[i]`` marks a
    copy of the previous item's profile, whose start must then be larger.
    """
    n = len(sizes)
    if n == 0:
        return []
    chosen = [0] * n
    # explicit stack of candidate cursors keeps recursion depth out of it
    cursor = [0] * n
    masks = [0] * (n + 1)
    i = 0
    cursor[0] = 0
    while True:
        if i == n:
            return chosen
        if i < 0:
            return None
        cand = starts[i]
        found = False
        j = cursor[i]
        while j < len(cand):
            s = cand[j]
            j += 1
            if s + sizes[i] > total:
                continue
            if same_as_prev[i] and i > 0 and s <= chosen[i - 1]:
                continue
            m = _interval_mask(s, sizes[i])
            if masks[i] & m:
                continue
            chosen[i] = s
            masks[i + 1] = masks[i] | m
            found = True
            break
        cursor[i] = j
        if found:
            i += 1
            if i < n:
                cursor[i] = 0
        else:
            i -= 1


def enumerate_configs(sizes, starts, max_counts, total):
    """All feasible count vectors (one count per profile), as a set of tuples.

    Placements are visited in canonical order (profile index non-decreasing,
    start increasing within a profile) so each layout is reached once.
    """
    n = len(sizes)
    out = set()
    counts = [0] * n

    def place(p, min_start, occupied):
        out.add(tuple(counts))
        for q in range(p, n):
            if counts[q] >= max_counts[q]:
                continue
            lo = min_start if q == p else 0
            for s in starts[q]:
                if s < lo or s + sizes[q] > total:
                    continue
                m = _interval_mask(s, sizes[q])
                if occupied & m:
                    continue
                counts[q] += 1
                place(q, s + 1, occupied | m)
                counts[q] -= 1

    place(0, 0, 0)
    return out


def fifo_completions(arrivals, services):
    """Single-server FIFO queue: completion time of each request."""
    out = [0.0] * len(arrivals)
    free_at = float("-inf")
    for i in range(len(arrivals)):
        begin = arrivals[i] if arrivals[i] > free_at else free_at
        free_at = begin + services[i]
        out[i] = free_at
    return out


def busy_fractions(busy_starts, busy_ends, interval, n_bins):
    """Fraction of each ``[k*interval, (k+1)*interval)`` bin covered by busy spans.

    Spans must be sorted and non-overlapping.
    """
    out = [0.0] * n_bins
    for a, b in zip(busy_starts, busy_ends):
        if b <= a:
            continue
        k = int(math.floor(a / interval))
        if k < 0:
            k = 0
        while k < n_bins:
            lo = k * interval
            hi = lo + interval
            if lo >= b:
                break
            overlap = (b if b < hi else hi) - (a if a > lo else lo)
            if overlap > 0:
                out[k] += overlap
            k += 1
    for k in range(n_bins):
        frac = out[k] / interval
        out[k] = 1.0 if frac > 1.0 else frac
    return out
