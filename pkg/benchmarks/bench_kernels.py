"""Compare the compiled kernels against the NumPy fallback.

Inputs are sized like one Traffic Junction training epoch (16 episodes of
20 steps, 5 agents, 32-dim messages).  Each kernel's outputs are checked for
agreement between backends before timing.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from mcomm import kernels


def make_inputs(rng, steps=320, n=5, dim=32, grid=7):
    m = rng.normal(size=(steps * n, dim))
    active = rng.random(steps * n) < 0.7
    g = (rng.random((steps * n, n)) < 0.5).astype(float)
    scores = rng.normal(size=(n, n))
    counts = rng.integers(0, 2, size=(grid, grid))
    road = np.zeros((grid, grid))
    road[grid // 2, :] = road[:, grid // 2] = 1.0
    pos = rng.integers(0, grid, size=(n, 2))
    route = rng.integers(0, 6, size=n)
    act_n = rng.random(n) < 0.7
    return {
        "entropy_rows": (m,),
        "round_stats": (m, active, n),
        "count_edges": (g, n),
        "topk_mask": (scores, act_n, 2),
        "tj_observe": (counts, road, pos, route, act_n, 1, 6),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12, equal_nan=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    impls = kernels.backends()
    if "compiled" not in impls:
        print("compiled backend not built; only the fallback is available")
    inputs = make_inputs(np.random.default_rng(args.seed))
    print(f"{'kernel':<14}" + "".join(f"{name:>14}" for name in impls) + f"{'speedup':>10}")
    for kname, kargs in inputs.items():
        outs = {name: getattr(mod, kname)(*kargs) for name, mod in impls.items()}
        if "compiled" in outs and not _same(outs["python"], outs["compiled"]):
            raise SystemExit(f"{kname}: backends disagree")
        times = {}
        for name, mod in impls.items():
            fn = getattr(mod, kname)
            number = 50
            best = min(timeit.repeat(lambda: fn(*kargs), number=number, repeat=args.repeat))
            times[name] = best / number * 1e6
        speed = times["python"] / times["compiled"] if "compiled" in times else float("nan")
        print(f"{kname:<14}" + "".join(f"{times[n]:>12.1f}us" for n in impls) + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
