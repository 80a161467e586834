"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py                 # default sizes
    python3 benchmarks/bench_kernels.py --features 6 --actions 4 --tasks 48
    python3 benchmarks/bench_kernels.py --json bench.json

Each kernel is called once untimed (numba compilation / cache load), then
timed over ``--repeat`` calls; the best of ``--rounds`` rounds is reported.
Outputs of the two backends are compared before timing.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from capbal import _kernels as K


def make_inputs(n_features, n_actions, n_tasks, group, seed):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((n_actions, n_features))
    Xs = rng.standard_normal((3, n_tasks, n_features))
    Rs = rng.random((3, n_tasks, n_actions))
    Xg = rng.standard_normal((group, n_features))
    acts = rng.integers(0, n_actions, size=group).astype(np.int64)
    coef = rng.standard_normal(group)
    return {
        "objective_grad": (W, Xs[0], Rs[0]),
        "caps_grads": (W, Xs, Rs),
        "conflict_penalty": (W, Xs, Rs, 0.01, 1e-10),
        "conflict_penalty_grad": (W, Xs, Rs, 0.01, 1e-10, 1e-4),
        "policy_gradient": (W, Xg, acts, coef),
    }


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def bench(args):
    if not K.NUMBA_IMPL:
        print("numba is not importable; nothing to compare", file=sys.stderr)
        return 1
    inputs = make_inputs(args.features, args.actions, args.tasks, args.group, args.seed)
    rows = []
    for name, call_args in inputs.items():
        f_np, f_nb = K.NUMPY_IMPL[name], K.NUMBA_IMPL[name]
        diff = _max_diff(f_np(*call_args), f_nb(*call_args))  # also warms up numba
        t = {}
        for label, fn in (("numpy", f_np), ("numba", f_nb)):
            times = timeit.repeat(lambda: fn(*call_args), number=args.repeat, repeat=args.rounds)
            t[label] = min(times) / args.repeat
        rows.append({"kernel": name, "numpy_us": t["numpy"] * 1e6, "numba_us": t["numba"] * 1e6,
                     "speedup": t["numpy"] / t["numba"], "max_abs_diff": diff})

    print(f"F={args.features} A={args.actions} T={args.tasks} group={args.group} "
          f"(dim {args.features * args.actions})")
    print(f"{'kernel':<24} {'numpy us':>10} {'numba us':>10} {'speedup':>8} {'max|diff|':>10}")
    for r in rows:
        print(f"{r['kernel']:<24} {r['numpy_us']:10.1f} {r['numba_us']:10.1f} "
              f"{r['speedup']:8.2f} {r['max_abs_diff']:10.1e}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"config": vars(args), "results": rows}, fh, indent=2)
    return 0


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--features", type=int, default=2)
    p.add_argument("--actions", type=int, default=4)
    p.add_argument("--tasks", type=int, default=12, help="tasks per capability")
    p.add_argument("--group", type=int, default=32, help="rollouts per policy-gradient call")
    p.add_argument("--repeat", type=int, default=200, help="calls per timing round")
    p.add_argument("--rounds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="also write results to this JSON file")
    return bench(p.parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
