"""Compare the Hungarian solver against exhaustive search and time it."""

import argparse
import itertools
import time

import numpy as np

from egosynth.matching import assignment_cost, hungarian


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--max-size", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    rng = np.random.default_rng(args.seed)

    perms, mismatches, solver_time = {}, 0, 0.0
    for _ in range(args.trials):
        n = int(rng.integers(1, args.max_size + 1))
        m = int(rng.integers(n, args.max_size + 1))
        cost = rng.integers(0, 512, (n, m)) / 256
        table = perms.setdefault((n, m), np.array(list(itertools.permutations(range(m), n))))
        start = time.perf_counter()
        cols = hungarian(cost)
        solver_time += time.perf_counter() - start
        mismatches += assignment_cost(cost, cols) != cost[np.arange(n), table].sum(axis=1).min()
    print(f"{args.trials} instances, {mismatches} mismatches, "
          f"{1e6 * solver_time / args.trials:.1f} us per solve")

    for size in (21, 42, 84):
        cost = rng.random((size, size))
        start = time.perf_counter()
        for _ in range(20):
            hungarian(cost)
        print(f"{size}x{size}: {1e3 * (time.perf_counter() - start) / 20:.2f} ms per solve")


if __name__ == "__main__":
    main()
