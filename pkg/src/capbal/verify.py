"""Self-contained oracle suite behind ``capbal verify``.

Every check compares an implementation against an independent oracle
(central finite differences, brute-force enumeration, hand arithmetic or
the other kernel backend) and returns a ``CheckResult``.
"""

import time
from dataclasses import dataclass

import numpy as np

from capbal import _kernels as K
from capbal._rng import make_rng
from capbal.balance import balance_score
from capbal.envpolicy import EnvSpec, build_environment, init_policy, logprob_gradient
from capbal.grpo import (
    GroupSpec,
    TrainState,
    build_group,
    group_advantages,
    grpo_gradient,
    rollout_group,
    sft_loss,
)
from capbal.metrics import PRESETS, ParetoArchive, dominates, integration_score, pareto_update
from capbal.reward import RewardWeights


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def central_difference(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def check_reference_metrics():
    b1 = balance_score((62.0, 74.8, 52.9))
    b2 = balance_score((80.95, 67.95, 61.94))
    i1 = integration_score((80.95, 67.95, 61.94), PRESETS["comparison"])
    i2 = integration_score((62.0, 74.8, 52.9), PRESETS["analysis"])
    ok = abs(b1 - 0.858) <= 1e-3 and abs(b2 - 0.887) <= 1e-3 and abs(i1 - 86.7) <= 0.15 and abs(i2 - 63.5) <= 0.1
    return ok, f"B={b1:.4f},{b2:.4f} I_s={i1:.3f},{i2:.3f}"


def check_logprob_fd(n_draws=100, seed=0):
    worst = 0.0
    for i in range(n_draws):
        rng = make_rng(seed, 100, i)
        F, A = int(rng.integers(1, 5)), int(rng.integers(2, 5))
        spec = EnvSpec(n_features=F, n_actions=A, tasks_per_capability=1)
        params = init_policy(spec, i).with_theta(rng.standard_normal(F * A))
        ctx = build_environment(spec).contexts()[0]
        a = int(rng.integers(A))

        def f(th):
            p = params.with_theta(th)
            z = p.matrix @ ctx.features
            return z[a] - np.log(np.exp(z - z.max()).sum()) - z.max()

        worst = max(worst, rel_error(logprob_gradient(params, ctx, a), central_difference(f, params.theta)))
    return worst < 1e-5, f"max rel err {worst:.2e}"


def check_sft_fd(n_draws=100, seed=0):
    worst = 0.0
    for i in range(n_draws):
        rng = make_rng(seed, 101, i)
        spec = EnvSpec(n_features=int(rng.integers(1, 5)), n_actions=int(rng.integers(2, 5)),
                       tasks_per_capability=3, seed=i)
        env = build_environment(spec)
        params = init_policy(spec, i).with_theta(rng.standard_normal(spec.dim))
        data = env.contexts()
        _, g = sft_loss(params, data)
        fd = central_difference(lambda th: sft_loss(params.with_theta(th), data)[0], params.theta)
        worst = max(worst, rel_error(g, fd))
    return worst < 1e-5, f"max rel err {worst:.2e}"


def check_advantages(n_groups=1000, seed=0):
    worst_sum, shift_ok = 0.0, True
    for i in range(n_groups):
        rng = make_rng(seed, 102, i)
        # dyadic rewards, power-of-two sizes and a dyadic shift keep every
        # floating-point operation exact, so invariance can be tested with ==
        n = 2 ** int(rng.integers(0, 6))
        r = rng.integers(0, 1024, size=n) / 1024.0
        a = group_advantages(r).advantages
        worst_sum = max(worst_sum, abs(float(a.sum())))
        shift_ok &= bool(np.array_equal(group_advantages(r + 0.25).advantages, a))
    return worst_sum <= 1e-9 and shift_ok, f"max |sum| {worst_sum:.1e}, shift invariant={shift_ok}"


def check_estimator(n_groups=10_000, seed=0):
    spec = EnvSpec(n_features=2, n_actions=2, tasks_per_capability=4, seed=seed)
    env = build_environment(spec)
    w = RewardWeights()
    data = env.contexts("domain")
    params = init_policy(spec, seed).with_theta(make_rng(seed, 103).standard_normal(spec.dim) * 0.5)
    state = TrainState(params=params, weights=w)
    gspec = GroupSpec(size=4, n_domain=4, n_reasoning=0, n_instruction=0)
    acc = np.zeros(spec.dim)
    for i in range(n_groups):
        rng = make_rng(seed, 104, i)
        group = rollout_group(params, build_group(data, gspec, rng), env, w, rng)
        acc += grpo_gradient(state, group, group_advantages(group))
    mean = acc / n_groups
    _, exact = K.objective_grad(params.matrix, env.X[0], env.reward_table("domain", w))
    exact = np.asarray(exact).reshape(-1)
    # a group of n tasks drawn without replacement from the n-task set: the
    # self-inclusive baseline scales the exact gradient by (n - 1) / n
    cos = float(mean @ exact / (np.linalg.norm(mean) * np.linalg.norm(exact)))
    return cos > 0.99, f"cosine {cos:.4f} over {n_groups} groups"


def check_pareto(n_streams=20, n_points=100, seed=0):
    for s in range(n_streams):
        pts = make_rng(seed, 105, s).integers(0, 10, size=(n_points, 3)).astype(float)
        arch = ParetoArchive()
        for p in pts:
            arch = pareto_update(arch, p)
        uniq = {tuple(p) for p in pts}
        brute = {p for p in uniq if not any(dominates(q, p) for q in uniq)}
        if set(arch.points) != brute:
            return False, f"stream {s} differs from brute force"
    return True, f"{n_streams} streams of {n_points} points match"


def check_backends(seed=0):
    rng = make_rng(seed, 106)
    W = rng.standard_normal((4, 4))
    Xs = rng.standard_normal((3, 12, 4))
    Rs = rng.random((3, 12, 4))
    worst = 0.0
    for name in ("caps_grads", "conflict_penalty"):
        a, b = K.NUMPY_IMPL[name], K.NUMBA_IMPL.get(name, K.NUMPY_IMPL[name])
        if name == "caps_grads":
            (va, ga), (vb, gb) = a(W, Xs, Rs), b(W, Xs, Rs)
            worst = max(worst, float(np.abs(va - vb).max()), float(np.abs(ga - gb).max()))
        else:
            worst = max(worst, abs(a(W, Xs, Rs, 0.01, 1e-10) - b(W, Xs, Rs, 0.01, 1e-10)))
    return worst < 1e-10, f"max abs diff {worst:.1e} (active backend: {K.BACKEND})"


CHECKS = (
    ("reference metric arithmetic", check_reference_metrics),
    ("log-prob gradient vs FD", check_logprob_fd),
    ("SFT gradient vs FD", check_sft_fd),
    ("advantage identities", check_advantages),
    ("GRPO estimator consistency", check_estimator),
    ("Pareto archive vs brute force", check_pareto),
    ("numba vs numpy kernels", check_backends),
)


def run_all():
    results = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing oracle is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results


def format_table(results):
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  status  seconds  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:7.2f}  {r.detail}")
    return "\n".join(lines)
