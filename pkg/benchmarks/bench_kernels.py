"""Time the numba kernels against their pure-numpy counterparts.

    python3 benchmarks/bench_kernels.py [--repeats 20]

Both paths are called directly, so one process measures both regardless of
PHASEREC_DISABLE_NUMBA.  Outputs are checked for bit equality before timing.
"""

import argparse
import time

import numpy as np

from phaserec import _kernels as K


def best_of(fn, repeats):
    fn()  # warm-up (and JIT compile for the numba path)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    img = rng.normal(40, 200, (512, 512))
    r = K.axis_coords(512, 128)
    c = K.axis_coords(512, 128)
    small = rng.random((128, 128))
    codes = rng.integers(0, 16, 400)
    idx = rng.integers(0, 400, (500, 400))
    seed = 0x1234_5678_9ABC
    yield ("resize 512->128",
           lambda: K.resize_bilinear_np(img, *r, *c),
           lambda: K.resize_bilinear_nb(img, *r, *c))
    yield ("histograms 128px 32x4x4",
           lambda: K.region_histograms_np(small, 32, 4),
           lambda: K.region_histograms_nb(small, 32, 4))
    yield ("sample 705 of 2350",
           lambda: K.sample_without_replacement_py(2350, 705, seed),
           lambda: K.sample_without_replacement_nb(2350, 705, np.uint64(seed)))
    yield ("bootstrap counts 500x400",
           lambda: K.bootstrap_counts_np(codes, idx, 16),
           lambda: K.bootstrap_counts_nb(codes, idx, 16))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args(argv)
    if not K.HAS_NUMBA:
        parser.exit(1, "numba is unavailable or disabled; nothing to compare\n")
    print(f"{'kernel':<28}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, np_fn, nb_fn in cases():
        np.testing.assert_array_equal(np_fn(), nb_fn())
        t_np = best_of(np_fn, args.repeats)
        t_nb = best_of(nb_fn, args.repeats)
        print(f"{name:<28}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
