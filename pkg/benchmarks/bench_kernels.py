"""Time each hot kernel in its numba build against its numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py``.  The first numba call of
every kernel is made before timing so compilation is not counted.
"""

import math
import timeit

import numpy as np

from navfuse import kernels as k
from navfuse.gridworld import generate_map


def main(repeat=5):
    grid = generate_map(40, 40, 0.15, None, 0)
    occ = grid.occupied
    free = np.argwhere(~occ)
    rows, cols = free[:1, 0].astype(np.int64), free[:1, 1].astype(np.int64)
    rng = np.random.default_rng(0)
    starts = [((c + rng.random()) * 0.25, (r + rng.random()) * 0.25) for r, c in free[rng.integers(len(free), size=2000)]]
    angles = rng.uniform(0, 2 * math.pi, size=len(starts))

    def moves(fn):
        for (x, y), a in zip(starts, angles):
            fn(occ, x, y, math.cos(a), math.sin(a))

    def rays(fn):
        for (x, y), a in zip(starts, angles):
            fn(occ, x, y, math.cos(a), math.sin(a), 3.0, 0.05)

    hd, n_t = 64, 2000
    ax = rng.normal(size=(n_t, 3, hd))
    u = rng.normal(scale=0.1, size=(3, hd, hd))
    offsets = np.array([0, 500, 1000, 1500, 2000], dtype=np.int64)

    cases = {
        "distance_field 40x40": (lambda: k.distance_field_nb(occ, rows, cols), lambda: k.distance_field_np(occ, rows, cols)),
        "move_blocked x2000": (lambda: moves(k.move_blocked_nb), lambda: moves(k.move_blocked_np)),
        "ray_depth x2000": (lambda: rays(k.ray_depth_nb), lambda: rays(k.ray_depth_np)),
        "gru_forward T=2000 H=64": (lambda: k.gru_forward_nb(ax, u, offsets), lambda: k.gru_forward_np(ax, u, offsets)),
    }
    print(f"{'kernel':<26}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, (fast, slow) in cases.items():
        fast()  # compile
        t_nb = min(timeit.repeat(fast, number=1, repeat=repeat)) * 1e3
        t_np = min(timeit.repeat(slow, number=1, repeat=max(1, repeat // 2))) * 1e3
        print(f"{name:<26}{t_nb:>10.2f}{t_np:>10.2f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
