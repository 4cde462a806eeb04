"""Time the compiled kernels against the pure-Python fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Sizes match the default synthetic task: about 40 subsampled frames, a 20 token
vocabulary and intermediate sequences of 5 to 12 tokens.
"""

import argparse
import timeit

import numpy as np

from multidec import _pykernels

try:
    from multidec import _ckernels
except ImportError:
    _ckernels = None

BLANK = 3


def cases(rng):
    T, V, L = 40, 20, 10
    logits = rng.normal(size=(T, V))
    logp = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
    labels = rng.integers(4, V, size=L).astype(np.int64)
    cands = np.array([c for c in range(4, V)], dtype=np.int64)
    r_prev = np.log(rng.uniform(0.01, 1.0, size=(T, 2)))
    ref = rng.integers(4, V, size=12).astype(np.int64)
    hyp = rng.integers(4, V, size=11).astype(np.int64)
    return {
        "ctc_forward_backward": lambda k: k.ctc_forward_backward(logp, labels, BLANK),
        "ctc_prefix_extend": lambda k: k.ctc_prefix_extend(logp, r_prev, int(labels[0]), cands, BLANK, False),
        "edit_distance_ops": lambda k: k.edit_distance_ops(ref, hyp),
    }


def per_call(fn, repeat: int) -> float:
    number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation` with Cython available")
    print(f"{'kernel':24s} {'python (us)':>12s} {'cython (us)':>12s} {'speedup':>8s}")
    for name, call in cases(np.random.default_rng(0)).items():
        py = per_call(lambda: call(_pykernels), args.repeat)
        if _ckernels is None:
            print(f"{name:24s} {py * 1e6:12.1f} {'-':>12s} {'-':>8s}")
            continue
        cy = per_call(lambda: call(_ckernels), args.repeat)
        print(f"{name:24s} {py * 1e6:12.1f} {cy * 1e6:12.1f} {py / cy:7.1f}x")


if __name__ == "__main__":
    main()
