"""Timing comparison of the numba kernels against the pure-numpy fallbacks.

Run with:  python3 benchmarks/bench_kernels.py
The numba path is also what SCENESEG_NUMBA=1 (default) selects at import time;
this script calls both internal implementations directly so a single process
can time the two backends side by side.
"""

import time

import numpy as np

from sceneseg import kernels


def timeit(fn, repeat=5):
    fn()  # warmup (includes JIT compilation for the numba path)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_fps(n_points, n_sample):
    rng = np.random.default_rng(0)
    pos = rng.uniform(0, 4, size=(n_points, 3))

    def run_numpy():
        kernels._fps_numpy(pos, n_sample, 0)

    rows = [("fps numpy", timeit(run_numpy))]
    if kernels.HAVE_NUMBA:
        def run_numba():
            kernels._fps_numba(pos, n_sample, 0)

        rows.append(("fps numba", timeit(run_numba)))
        got_a = kernels._fps_numpy(pos, n_sample, 0)
        got_b = kernels._fps_numba(pos, n_sample, 0)
        assert np.array_equal(got_a, got_b), "backend mismatch"
    return rows


def bench_sphere(n_points, n_key, r=0.4, cap=32):
    rng = np.random.default_rng(1)
    pos = rng.uniform(0, 4, size=(n_points, 3))
    keys = pos[rng.choice(n_points, n_key, replace=False)]

    def make_out():
        return np.full((n_key, cap), -1, dtype=np.int64), np.zeros(n_key, dtype=np.int64)

    def run_numpy():
        idx, cnt = make_out()
        kernels._sphere_query_numpy(keys, pos, r * r, cap, idx, cnt)
        return idx, cnt

    rows = [("sphere_query numpy", timeit(run_numpy))]
    if kernels.HAVE_NUMBA:
        def run_numba():
            idx, cnt = make_out()
            kernels._sphere_query_numba(keys, pos, r * r, cap, idx, cnt)
            return idx, cnt

        rows.append(("sphere_query numba", timeit(run_numba)))
        a_idx, a_cnt = run_numpy()
        b_idx, b_cnt = run_numba()
        assert np.array_equal(a_idx, b_idx) and np.array_equal(a_cnt, b_cnt)
    return rows


def main():
    print(f"numba available: {kernels.HAVE_NUMBA}")
    for n_points, n_sample in [(2_000, 32), (20_000, 64), (100_000, 128)]:
        print(f"\nFPS: {n_points} points, {n_sample} samples")
        for name, t in bench_fps(n_points, n_sample):
            print(f"  {name:22s} {t * 1e3:9.3f} ms")
    for n_points, n_key in [(2_000, 32), (20_000, 64), (100_000, 128)]:
        print(f"\nsphere_query: {n_points} points, {n_key} keypoints")
        for name, t in bench_sphere(n_points, n_key):
            print(f"  {name:22s} {t * 1e3:9.3f} ms")


if __name__ == "__main__":
    main()
