"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--requests 200000]

Each case runs both implementations on the same inputs, checks the outputs
agree, and reports the best-of-N wall time.
"""

import argparse
import itertools
import sys
import timeit

import numpy as np

from migperf import _kernels_py
from migperf import device_model as dm

try:
    from migperf import _kernels
except ImportError:
    _kernels = None


def placement_cases(entry):
    """Every multiset of up to 7 profiles, as kernel arguments."""
    names = [p.name for p in entry.profiles]
    cases = []
    for k in range(1, 8):
        for combo in itertools.combinations_with_replacement(names, k):
            profiles = [entry.profile(n) for n in combo]
            cases.append(
                (
                    [p.compute_slices for p in profiles],
                    [list(p.allowed_starts) for p in profiles],
                    [i > 0 and combo[i] == combo[i - 1] for i in range(k)],
                    entry.total_compute_slices,
                )
            )
    return cases


def queue_inputs(n, seed=0):
    rng = np.random.default_rng(seed)
    arrivals = np.cumsum(rng.exponential(10.0, n))
    services = rng.normal(9.0, 1.0, n).clip(0.1)
    return arrivals, services


def cases(requests):
    catalog = dm.load_catalog()
    arrivals, services = queue_inputs(requests)
    completions = np.asarray(_kernels_py.fifo_completions(arrivals.tolist(), services.tolist()))
    busy_from = np.maximum(arrivals, np.concatenate(([0.0], completions[:-1]))) + 2.0
    n_bins = int(completions[-1] // 100.0) + 1
    for entry in catalog:
        placements = placement_cases(entry)
        yield (
            f"search_placement ({entry.model_name}, {len(placements)} multisets)",
            lambda impl, ps=placements: [impl.search_placement(*c) for c in ps],
            lambda impl, ps=placements: [impl.search_placement(*c) for c in ps],
        )
        args = (
            [p.compute_slices for p in entry.profiles],
            [list(p.allowed_starts) for p in entry.profiles],
            [p.max_count for p in entry.profiles],
            entry.total_compute_slices,
        )
        yield (
            f"enumerate_configs ({entry.model_name})",
            lambda impl, a=args: impl.enumerate_configs(*a),
            lambda impl, a=args: impl.enumerate_configs(*a),
        )
    # the fallback is fed lists, as migperf.kernels does
    yield (
        f"fifo_completions ({requests} requests)",
        lambda impl: impl.fifo_completions(arrivals.tolist(), services.tolist()),
        lambda impl: impl.fifo_completions(arrivals, services),
    )
    yield (
        f"busy_fractions ({requests} spans, {n_bins} bins)",
        lambda impl: impl.busy_fractions(busy_from.tolist(), completions.tolist(), 100.0, n_bins),
        lambda impl: impl.busy_fractions(busy_from, completions, 100.0, n_bins),
    )


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--requests", type=int, default=200_000)
    args = parser.parse_args(argv)
    if _kernels is None:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1
    print(f"{'case':<48} {'python s':>10} {'cython s':>10} {'speedup':>8}")
    for name, run_py, run_cy in cases(args.requests):
        expected, got = run_py(_kernels_py), run_cy(_kernels)
        if list(expected) != list(got) and not (isinstance(expected, set) and expected == got):
            print(f"{name}: outputs differ", file=sys.stderr)
            return 1
        t_py = best(lambda: run_py(_kernels_py), args.repeat)
        t_cy = best(lambda: run_cy(_kernels), args.repeat)
        print(f"{name:<48} {t_py:>10.4f} {t_cy:>10.4f} {t_py / t_cy:>7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
