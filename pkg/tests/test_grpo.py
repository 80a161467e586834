from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from capbal import _kernels as K
from capbal._rng import make_rng
from capbal.config import RunConfig
from capbal.envpolicy import Capability, Difficulty, EnvSpec, build_environment, init_policy
from capbal.errors import ConfigError, DataError, NumericalError
from capbal.grpo import (
    GroupSpec,
    TrainState,
    build_group,
    group_advantages,
    grpo_gradient,
    rollout_group,
    sft_loss,
    train,
)
from capbal.reward import RewardWeights

from conftest import central_difference


@pytest.fixture(scope="module")
def env():
    return build_environment(EnvSpec(2, 4, 12, 0.5, 1))


# ------------------------------------------------------------------ groups


def test_default_counts():
    spec = GroupSpec()
    assert spec.capability_counts() == (3, 3, 2)
    assert spec.difficulty_counts() == (3, 3, 2)
    cells = spec.cell_counts()
    assert cells.sum(axis=1).tolist() == [3, 3, 2]
    assert cells.sum(axis=0).tolist() == [3, 3, 2]


@given(st.sampled_from([8, 16, 32, 5, 13]))
def test_scaled_cells_respect_margins(size):
    spec = GroupSpec().scaled(size)
    cells = spec.cell_counts()
    assert cells.min() >= 0
    assert tuple(cells.sum(axis=1)) == spec.capability_counts()
    assert tuple(cells.sum(axis=0)) == spec.difficulty_counts()


def test_doubling_preserves_proportions():
    assert GroupSpec().scaled(16).capability_counts() == (6, 6, 4)
    assert GroupSpec().scaled(32).capability_counts() == (12, 12, 8)


def test_build_group_counts_and_no_replacement(env):
    spec = GroupSpec()
    for i in range(50):
        g = build_group(env.contexts(), spec, make_rng(0, i))
        caps = [c.capability for c in g]
        assert [caps.count(c) for c in Capability] == [3, 3, 2]
        diffs = [c.difficulty for c in g]
        assert [diffs.count(d) for d in Difficulty] == [3, 3, 2]
        assert len({id(c) for c in g}) == len(g)


def test_single_task_group(env):
    spec = GroupSpec(size=1, n_domain=1, n_reasoning=0, n_instruction=0)
    g = build_group(env.contexts(), spec, make_rng(0))
    assert len(g) == 1 and g[0].capability is Capability.DOMAIN


def test_borrowing_from_nearest_tier(env):
    no_hard = [c for c in env.contexts() if c.difficulty is not Difficulty.HARD]
    g = build_group(no_hard, GroupSpec(), make_rng(3))
    assert len(g) == 8
    assert all(c.difficulty is not Difficulty.HARD for c in g)


def test_deficient_stratum_named(env):
    few = [c for c in env.contexts() if c.capability is not Capability.INSTRUCTION]
    with pytest.raises(DataError, match="instruction"):
        build_group(few, GroupSpec(), make_rng(0))


def test_invalid_group_spec():
    with pytest.raises(ConfigError):
        GroupSpec(size=8, n_domain=3, n_reasoning=3, n_instruction=3).validate()


# -------------------------------------------------------------- advantages


def test_advantage_examples():
    np.testing.assert_array_equal(group_advantages([1.0, 0.0]).advantages, [0.5, -0.5])
    np.testing.assert_array_equal(group_advantages([0.3] * 5).advantages, np.zeros(5))
    with pytest.raises(DataError):
        group_advantages([])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=64), st.floats(-10, 10))
def test_advantages_sum_zero_and_shift_invariant(r, c):
    a = group_advantages(r)
    assert abs(a.advantages.sum()) <= 1e-9
    np.testing.assert_allclose(group_advantages(np.array(r) + c).advantages, a.advantages, atol=1e-12)
    np.testing.assert_allclose(a.advantages, np.array(r) - a.baseline, atol=0)


# --------------------------------------------------------------- gradient


def test_zero_advantage_zero_gradient(env):
    p = init_policy(env.spec, 0)
    state = TrainState(params=p)
    g = rollout_group(p, build_group(env.contexts(), GroupSpec(), make_rng(0)), env, RewardWeights(), make_rng(1))
    zero = replace(group_advantages(g), advantages=np.zeros(len(g)))
    np.testing.assert_array_equal(grpo_gradient(state, g, zero), 0.0)
    one = GroupSpec(size=1, n_domain=1, n_reasoning=0, n_instruction=0)
    g1 = rollout_group(p, build_group(env.contexts(), one, make_rng(0)), env, RewardWeights(), make_rng(1))
    np.testing.assert_array_equal(grpo_gradient(state, g1, group_advantages(g1)), 0.0)


def test_gradient_matches_score_function_formula(env):
    p = init_policy(env.spec, 0).with_theta(np.random.default_rng(0).standard_normal(8))
    g = rollout_group(p, build_group(env.contexts(), GroupSpec(), make_rng(5)), env, RewardWeights(), make_rng(6))
    adv = group_advantages(g)
    from capbal.envpolicy import logprob_gradient

    manual = np.mean([a * logprob_gradient(p, m.task, m.action) for a, m in zip(adv.advantages, g.members)], axis=0)
    np.testing.assert_allclose(grpo_gradient(TrainState(params=p), g, adv), manual, atol=1e-14)


def test_penalty_requires_env(env):
    p = init_policy(env.spec, 0)
    g = rollout_group(p, build_group(env.contexts(), GroupSpec(), make_rng(0)), env, RewardWeights(), make_rng(1))
    with pytest.raises(ConfigError):
        grpo_gradient(TrainState(params=p, l2_conflict_penalty=1.0), g, group_advantages(g))


def test_estimator_consistency_small():
    spec = EnvSpec(2, 2, 4, 0.0, 0)
    env = build_environment(spec)
    w = RewardWeights()
    p = init_policy(spec, 0).with_theta(np.array([0.4, -0.3, -0.2, 0.5]))
    data = env.contexts("domain")
    gspec = GroupSpec(size=4, n_domain=4, n_reasoning=0, n_instruction=0)
    state = TrainState(params=p, weights=w)
    acc = np.zeros(4)
    n = 20_000
    for i in range(n):
        rng = make_rng(1, i)
        grp = rollout_group(p, build_group(data, gspec, rng), env, w, rng)
        acc += grpo_gradient(state, grp, group_advantages(grp))
    _, exact = K.np_objective_grad(p.matrix, env.X[0], env.reward_table("domain", w))
    exact = exact.reshape(-1)
    mean = acc / n
    assert mean @ exact / (np.linalg.norm(mean) * np.linalg.norm(exact)) > 0.99


# -------------------------------------------------------------------- SFT


def test_sft_loss_at_zero(env):
    p = init_policy(env.spec, 0).with_theta(np.zeros(8))
    loss, _ = sft_loss(p, env.contexts())
    assert loss == pytest.approx(len(env.contexts()) * np.log(4))


def test_sft_gradient_fd(env):
    rng = np.random.default_rng(4)
    for _ in range(20):
        p = init_policy(env.spec, 0).with_theta(rng.standard_normal(8))
        loss, g = sft_loss(p, env.contexts())
        assert loss >= 0
        fd = central_difference(lambda th: sft_loss(p.with_theta(th), env.contexts())[0], p.theta)
        assert np.linalg.norm(g - fd) / np.linalg.norm(g) < 1e-5


def test_sft_descent_step(env):
    data = env.contexts()[:1]
    p = init_policy(env.spec, 0)
    loss, g = sft_loss(p, data)
    assert sft_loss(p.with_theta(p.theta - 1e-2 * g), data)[0] < loss


def test_sft_empty():
    with pytest.raises(DataError):
        sft_loss(init_policy(EnvSpec(), 0), [])


# ------------------------------------------------------------------ train


def _cfg(**kw):
    base = dict(env=EnvSpec(2, 2, 12, 1.0, 0), iterations=30, eval_interval=10, step_size=0.5, seed=3)
    base.update(kw)
    return RunConfig(**base)


def test_train_deterministic():
    a, b = train(_cfg()), train(_cfg())
    strip = lambda recs: [{k: v for k, v in r.items() if k != "wall_clock"} for r in recs]  # noqa: E731
    assert strip(a.records) == strip(b.records)
    assert a.state.params.theta.tobytes() == b.state.params.theta.tobytes()


def test_train_schedule():
    log = train(_cfg(iterations=250, eval_interval=100))
    grpo = [r for r in log.records if r["stage"] == "grpo"]
    assert [r["iteration"] for r in grpo] == [100, 200, 250]
    assert [("controller" in r) for r in grpo] == [True, True, False]
    assert log.stages()[0] == "start" and log.stages()[-1] == "end"


def test_sft_only_run():
    log = train(_cfg(iterations=0, sft_epochs=2))
    assert [s for s in log.stages() if s not in ("start", "end")] == ["sft", "sft"]
    assert log.state.weights == RewardWeights(0.5, 0.5, 0.5)
    losses = [r["sft_loss"] for r in log.records if r["stage"] == "sft"]
    assert losses[1] < losses[0]


def test_train_requires_seed():
    with pytest.raises(ConfigError):
        train(_cfg(seed=None))


def test_train_aborts_on_nan(monkeypatch):
    import capbal.grpo as grpo_mod

    def poisoned(*args, **kwargs):
        return np.full(4, np.nan)

    monkeypatch.setattr(grpo_mod, "grpo_gradient", poisoned)
    with pytest.raises(NumericalError) as exc:
        train(_cfg())
    assert exc.value.iteration == 1 and "grpo" in exc.value.module


def test_records_carry_required_fields():
    rec = train(_cfg()).records[-1]
    for key in ("iteration", "stage", "capability_scores", "balance", "weights", "max_pairwise_cosine",
                "group_size", "penalty", "any_common_ascent", "wall_clock"):
        assert key in rec
    w = rec["weights"]
    assert 0.2 <= w["alpha"] <= 0.8 and abs(w["beta1"] + w["beta2"] - 1) <= 1e-9
