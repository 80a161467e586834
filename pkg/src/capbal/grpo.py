"""Stratified groups, group-relative advantages, the GRPO step and SFT warm start."""

import functools
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from capbal import _kernels as K
from capbal._rng import make_rng
from capbal.balance import (
    CapabilityScores,
    OrthogonalityConfig,
    balance_score,
    conflict_penalty_gradient,
    decide,
    orthogonality_check,
    remediate,
)
from capbal.envpolicy import (
    CAPABILITIES,
    DIFFICULTIES,
    Difficulty,
    PolicyParams,
    _largest_remainder,
    build_environment,
    init_policy,
)
from capbal.errors import ConfigError, DataError, NumericalError
from capbal.metrics import ParetoArchive, pareto_update, stationarity_check
from capbal.reward import RewardWeights, Rollout, SubScores, composite

log = logging.getLogger(__name__)

# nearest-tier borrowing order when a (capability, difficulty) cell runs dry
_BORROW = {
    Difficulty.EASY: (Difficulty.EASY, Difficulty.MEDIUM, Difficulty.HARD),
    Difficulty.MEDIUM: (Difficulty.MEDIUM, Difficulty.EASY, Difficulty.HARD),
    Difficulty.HARD: (Difficulty.HARD, Difficulty.MEDIUM, Difficulty.EASY),
}


@dataclass(frozen=True)
class GroupSpec:
    size: int = 8
    n_domain: int = 3
    n_reasoning: int = 3
    n_instruction: int = 2
    difficulty_mix: tuple = (0.4, 0.4, 0.2)

    def validate(self):
        counts = self.capability_counts()
        if min(counts) < 0 or self.size < 1:
            raise ConfigError(f"invalid group counts {counts} for size {self.size}")
        if sum(counts) != self.size:
            raise ConfigError(f"capability counts {counts} do not sum to group size {self.size}")
        mix = tuple(float(v) for v in self.difficulty_mix)
        if len(mix) != 3 or min(mix) < 0 or abs(sum(mix) - 1.0) > 1e-9:
            raise ConfigError(f"difficulty_mix must be three nonnegative fractions summing to 1, got {mix}")
        return self

    def capability_counts(self):
        return (self.n_domain, self.n_reasoning, self.n_instruction)

    def difficulty_counts(self):
        return _largest_remainder(self.difficulty_mix, self.size)

    def cell_counts(self):
        """3x3 integer table (capability x difficulty) with both margins fixed.

        Row sums are the capability counts, column sums the largest-remainder
        difficulty counts. Cells start at the floor of ``n_cap * frac`` and
        leftover units go to the largest remainders, ties broken
        capability-major in D < R < I, easy < medium < hard order.
        """
        caps = np.array(self.capability_counts())
        cols = np.array(self.difficulty_counts())
        target = np.outer(caps, np.asarray(self.difficulty_mix, dtype=float))
        cells = np.floor(target + 1e-12).astype(int)
        rem = target - cells
        row_left = caps - cells.sum(axis=1)
        col_left = cols - cells.sum(axis=0)
        order = sorted(((i, j) for i in range(3) for j in range(3)), key=lambda ij: -rem[ij])
        while row_left.sum() > 0:
            for i, j in order:
                if row_left[i] > 0 and col_left[j] > 0:
                    cells[i, j] += 1
                    row_left[i] -= 1
                    col_left[j] -= 1
                    break
            else:  # pragma: no cover - margins always agree
                raise ConfigError("cannot balance group cell counts")
        return cells

    def scaled(self, new_size):
        counts = _largest_remainder(np.array(self.capability_counts()) / self.size, new_size)
        return replace(self, size=new_size, n_domain=counts[0], n_reasoning=counts[1], n_instruction=counts[2])

    def to_dict(self):
        return {
            "size": self.size,
            "n_domain": self.n_domain,
            "n_reasoning": self.n_reasoning,
            "n_instruction": self.n_instruction,
            "difficulty_mix": list(self.difficulty_mix),
        }


@dataclass(frozen=True)
class Group:
    members: tuple

    @property
    def counts(self):
        return tuple(sum(1 for m in self.members if m.task.capability == c) for c in CAPABILITIES)

    @property
    def rewards(self):
        return np.array([m.composite for m in self.members])

    def __len__(self):
        return len(self.members)


@dataclass(frozen=True)
class AdvantageSet:
    advantages: np.ndarray
    baseline: float


@dataclass(frozen=True)
class TrainState:
    params: PolicyParams
    weights: RewardWeights = RewardWeights()
    iteration: int = 0
    group_spec: GroupSpec = GroupSpec()
    l2_conflict_penalty: float = 0.0
    seed: int = 0


@functools.lru_cache(maxsize=64)
def _validated_cells(spec):
    # specs are frozen, so the rounding table is computed once per spec
    return spec.validate().cell_counts()


def build_group(dataset, spec, rng):
    """Sample one stratified group (without replacement) from ``dataset``.

    Cells with too few tasks borrow from the nearest difficulty tier of the
    same capability; a shortfall after borrowing raises ``DataError``.
    """
    targets = _validated_cells(spec)
    cells = {(c, d): [] for c in CAPABILITIES for d in DIFFICULTIES}
    for ctx in dataset:
        cells[(ctx.capability, ctx.difficulty)].append(ctx)
    chosen = []
    for ci, cap in enumerate(CAPABILITIES):
        avail = {d: list(cells[(cap, d)]) for d in DIFFICULTIES}
        for di, diff in enumerate(DIFFICULTIES):
            need = int(targets[ci, di])
            for src in _BORROW[diff]:
                if need == 0:
                    break
                pool = avail[src]
                take = min(need, len(pool))
                if take == 0:
                    continue
                idx = sorted(rng.choice(len(pool), size=take, replace=False).tolist(), reverse=True)
                chosen.extend(pool.pop(i) for i in idx)
                need -= take
            if need > 0:
                raise DataError(
                    f"stratum ({cap.value}, {diff.value}) short by {need} tasks after borrowing"
                )
    return chosen


def sample_actions(params, contexts, rng):
    X = np.stack([np.asarray(c.features, dtype=float) for c in contexts])
    z = X @ params.matrix.T
    z -= z.max(axis=1, keepdims=True)
    P = np.exp(z)
    P /= P.sum(axis=1, keepdims=True)
    u = rng.random(len(contexts))
    cdf = np.cumsum(P, axis=1)
    return np.minimum((cdf < u[:, None]).sum(axis=1), params.n_actions - 1)


def rollout_group(params, contexts, env, weights, rng):
    actions = sample_actions(params, contexts, rng)
    members = []
    for ctx, a in zip(contexts, actions):
        s = SubScores(*env.subscores(ctx, int(a)))
        members.append(Rollout(task=ctx, action=int(a), subscores=s, composite=composite(weights, s)))
    return Group(tuple(members))


def group_advantages(group):
    rewards = group.rewards if isinstance(group, Group) else np.asarray(group, dtype=float)
    if rewards.size == 0:
        raise DataError("cannot compute advantages for an empty group")
    baseline = float(rewards.mean())
    return AdvantageSet(advantages=rewards - baseline, baseline=baseline)


def grpo_gradient(state, group, advantages, env=None, orth=OrthogonalityConfig()):
    """Ascent direction: mean of advantage * grad log pi, minus the conflict-penalty gradient."""
    params = state.params
    X = np.stack([np.asarray(m.task.features, dtype=float) for m in group.members])
    if X.shape[1] != params.n_features:
        raise ConfigError(f"group features have length {X.shape[1]}, policy expects {params.n_features}")
    actions = np.array([m.action for m in group.members], dtype=np.int64)
    adv = np.asarray(advantages.advantages, dtype=float)
    g = np.asarray(K.policy_gradient(params.matrix, X, actions, adv)).reshape(-1)
    if state.l2_conflict_penalty > 0:
        if env is None:
            raise ConfigError("conflict penalty is active but no environment was given")
        Rs = env.reward_tables(state.weights)
        g = g - state.l2_conflict_penalty * conflict_penalty_gradient(params.matrix, env.X, Rs, orth)
    return g


def sft_loss(params, dataset):
    """Summed negative log-likelihood of each task's gold action, with its gradient."""
    dataset = list(dataset)
    if not dataset:
        raise DataError("SFT needs a nonempty dataset")
    X = np.stack([np.asarray(c.features, dtype=float) for c in dataset])
    gold = np.array([c.gold_action for c in dataset], dtype=np.int64)
    z = X @ params.matrix.T
    zmax = z.max(axis=1, keepdims=True)
    logz = (zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1)))
    loss = float((logz - z[np.arange(len(gold)), gold]).sum())
    n = len(dataset)
    grad = -n * np.asarray(K.policy_gradient(params.matrix, X, gold, np.ones(n))).reshape(-1)
    return loss, grad


# ------------------------------------------------------------------ training


def capability_scores(params, env):
    acc = env.expected_accuracy(params)
    return CapabilityScores(*(float(100.0 * a) for a in acc))


@dataclass
class RunLog:
    records: list = field(default_factory=list)
    state: TrainState | None = None
    archive: ParetoArchive = ParetoArchive()

    def append(self, record, sink=None):
        self.records.append(record)
        if sink is not None:
            sink(record)

    def stages(self):
        return [r["stage"] for r in self.records]


def _require_finite(vec, iteration, module):
    if not np.all(np.isfinite(vec)):
        raise NumericalError(iteration, module)


def _record(stage, iteration, state, env, cfg, archive, rng, *, loss=None, decision=None,
            report=None, action=None):
    scores = capability_scores(state.params, env)
    B = balance_score(scores) if sum(scores.as_tuple()) > 0 else 0.0
    if report is None:
        _, G = env.capability_gradients(state.params, state.weights)
        report = orthogonality_check(G, cfg.orthogonality)
    stat = stationarity_check(state.params, env, state.weights, cfg.pareto, rng)
    rec = {
        "iteration": state.iteration,
        "stage": stage,
        "capability_scores": scores.to_dict(),
        "balance": B,
        "weights": state.weights.to_dict(),
        "max_pairwise_cosine": report.max_cosine,
        "pairwise_cosines": list(report.pairwise_cosines),
        "degenerate_gradients": report.degenerate,
        "group_size": state.group_spec.size,
        "penalty": state.l2_conflict_penalty,
        "any_common_ascent": stat.any_common_ascent,
        "pareto_archive_size": len(archive),
    }
    if loss is not None:
        rec["sft_loss"] = loss
    if decision is not None:
        rec["controller"] = decision.to_dict()
    if action is not None:
        rec["remediation"] = action
    rec["wall_clock"] = time.time()
    return rec


def train(config, dataset=None, sink=None):
    """Stage 1 (SFT epochs) then Stage 2 (GRPO iterations).

    The log opens with a ``start`` record (initial policy), holds one
    ``sft`` record per epoch and one ``grpo`` record per eval interval
    (plus the last iteration), and closes with an ``end`` record describing
    the returned state, i.e. after the last controller/remediation step.

    ``dataset`` is an optional list of TaskContexts (e.g. curated instances
    bound to environment slots); without it every environment task is used.
    Records are passed to ``sink`` as soon as they are produced.
    """
    config.validate()
    env = build_environment(config.env, config.reward_model_spec())
    pool = list(dataset) if dataset is not None else env.contexts()
    if not pool:
        raise DataError("training pool is empty")
    state = TrainState(
        params=init_policy(config.env, config.seed),
        weights=RewardWeights(*config.initial_weights),
        group_spec=config.group.validate(),
        seed=config.seed,
    )
    runlog = RunLog(state=state)
    archive = ParetoArchive()
    orth = config.orthogonality

    def eval_rng(stage_id, it):
        return make_rng(config.seed, 3, stage_id, it)

    runlog.append(_record("start", 0, state, env, config, archive, eval_rng(2, 0)), sink)

    # Stage 1
    for epoch in range(1, config.sft_epochs + 1):
        loss, grad = sft_loss(state.params, pool)
        _require_finite(grad, epoch, "grpo.sft_loss")
        theta = state.params.theta - config.sft_step_size * grad / len(pool)
        state = replace(state, params=state.params.with_theta(theta))
        archive = pareto_update(archive, capability_scores(state.params, env))
        runlog.append(_record("sft", epoch, replace(state, iteration=epoch), env, config, archive,
                              eval_rng(0, epoch), loss=loss), sink)

    # Stage 2
    for it in range(1, config.iterations + 1):
        rng = make_rng(config.seed, 2, it)
        contexts = build_group(pool, state.group_spec, rng)
        group = rollout_group(state.params, contexts, env, state.weights, rng)
        adv = group_advantages(group)
        g = grpo_gradient(state, group, adv, env=env, orth=orth)
        _require_finite(g, it, "grpo.grpo_gradient")
        theta = state.params.theta + config.step_size * g
        _require_finite(theta, it, "grpo.update")
        state = replace(state, params=state.params.with_theta(theta), iteration=it)

        at_eval = it % config.eval_interval == 0
        if not (at_eval or it == config.iterations):
            continue
        scores = capability_scores(state.params, env)
        archive = pareto_update(archive, scores)
        _, G = env.capability_gradients(state.params, state.weights)
        _require_finite(G, it, "envpolicy.exact_capability_objective")
        report = orthogonality_check(G, orth)
        decision = action = None
        logged_state = state
        if at_eval:
            if sum(scores.as_tuple()) > 0:
                decision = decide(state.weights, scores, config.controller)
                state = replace(state, weights=decision.after)
            if orth.enabled and it % orth.check_interval == 0:
                state, action = remediate(report, state, orth)
        runlog.append(
            _record("grpo", it, logged_state, env, config, archive, eval_rng(1, it), decision=decision,
                    report=report, action=action),
            sink,
        )

    runlog.append(_record("end", state.iteration, state, env, config, archive, eval_rng(2, 1)), sink)
    runlog.state, runlog.archive = state, archive
    return runlog

