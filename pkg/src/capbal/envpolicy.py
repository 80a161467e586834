"""Synthetic multi-capability environments and the linear-softmax policy.

Every capability owns a finite task set, so expected rewards and their
policy gradients are computed exactly by enumeration over (task, action).

Conflict construction: one base task set is drawn, and the three capability
task sets are copies of it whose feature vectors are rotated, pairwise block
by block, by ``0``, ``phi`` and ``2 * phi`` with ``phi = conflict_strength *
120deg``. Rewards (gold action, response formats, reward-model content) are
shared by the copies. Under a block rotation ``Q`` the exact gradient at
``theta = 0`` maps as ``G -> G @ Q.T`` and ``<G, G @ Q.T> = cos(phi) |G|^2``,
so the pairwise gradient cosines at the origin are ``cos(phi)`` and
``cos(2 * phi)``: exactly 1 for ``conflict_strength = 0`` and exactly -0.5
for ``conflict_strength = 1``.
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from capbal import _kernels as K
from capbal._rng import make_rng
from capbal.errors import ConfigError, DataError
from capbal.reward import (
    FormatConstraints,
    ResponseMeta,
    RewardModelSpec,
    composite_table,
    model_score_table,
    score_format,
)


class Capability(str, enum.Enum):
    DOMAIN = "domain"
    REASONING = "reasoning"
    INSTRUCTION = "instruction"

    @property
    def index(self):
        return CAPABILITIES.index(self)


CAPABILITIES = (Capability.DOMAIN, Capability.REASONING, Capability.INSTRUCTION)


class Difficulty(str, enum.Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"

    @property
    def index(self):
        return DIFFICULTIES.index(self)


DIFFICULTIES = (Difficulty.EASY, Difficulty.MEDIUM, Difficulty.HARD)

DEFAULT_DIFFICULTY_MIX = (0.4, 0.4, 0.2)
CONTENT_DIM = 4
DEFAULT_STAGE_COUNT = 3


@dataclass(frozen=True)
class EnvSpec:
    n_features: int = 4
    n_actions: int = 4
    tasks_per_capability: int = 12
    conflict_strength: float = 0.0
    seed: int = 0

    def validate(self):
        for name in ("n_features", "n_actions", "tasks_per_capability"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"EnvSpec.{name} must be a positive integer, got {v!r}")
        if not 0.0 <= float(self.conflict_strength) <= 1.0:
            raise ConfigError(f"conflict_strength must lie in [0, 1], got {self.conflict_strength}")
        if self.conflict_strength > 0 and self.n_features < 2:
            raise ConfigError("conflict_strength > 0 needs n_features >= 2")
        if int(self.seed) < 0:
            raise ConfigError("seed must be unsigned")
        return self

    @property
    def dim(self):
        return self.n_features * self.n_actions

    def to_dict(self):
        return {
            "n_features": self.n_features,
            "n_actions": self.n_actions,
            "tasks_per_capability": self.tasks_per_capability,
            "conflict_strength": self.conflict_strength,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class PolicyParams:
    theta: np.ndarray
    n_features: int
    n_actions: int

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).reshape(-1)
        if theta.size != self.n_features * self.n_actions:
            raise ConfigError(
                f"theta has {theta.size} entries, expected {self.n_actions}x{self.n_features}"
            )
        object.__setattr__(self, "theta", theta)

    @property
    def matrix(self):
        """Weights as (n_actions, n_features); a view, not a copy."""
        return self.theta.reshape(self.n_actions, self.n_features)

    def with_theta(self, theta):
        return PolicyParams(theta, self.n_features, self.n_actions)

    def is_finite(self):
        return bool(np.all(np.isfinite(self.theta)))


@dataclass(frozen=True, eq=False)
class TaskContext:
    capability: Capability
    features: np.ndarray
    gold_action: int
    difficulty: Difficulty
    slot: int = 0
    content: np.ndarray = field(default_factory=lambda: np.zeros(CONTENT_DIM))
    constraints: FormatConstraints = field(default_factory=FormatConstraints)
    responses: tuple = ()

    @property
    def key(self):
        return (self.capability.value, self.slot)


def init_policy(spec, seed):
    spec.validate()
    rng = make_rng(seed, 1)
    theta = rng.uniform(-0.01, 0.01, size=spec.dim)
    return PolicyParams(theta, spec.n_features, spec.n_actions)


def _check_dims(params, features):
    if features.shape[-1] != params.n_features:
        raise ConfigError(
            f"feature length {features.shape[-1]} != policy n_features {params.n_features}"
        )


def action_distribution(params, ctx):
    x = np.asarray(ctx.features, dtype=float)
    _check_dims(params, x)
    z = params.matrix @ x
    z -= z.max()
    p = np.exp(z)
    return p / p.sum()


def logprob_gradient(params, ctx, action):
    """d log pi(action | ctx) / d theta, flattened like ``theta``."""
    if not 0 <= int(action) < params.n_actions:
        raise ConfigError(f"action {action} out of range for {params.n_actions} actions")
    x = np.asarray(ctx.features, dtype=float)
    p = action_distribution(params, ctx)
    e = -p
    e[int(action)] += 1.0
    return np.outer(e, x).reshape(-1)


def _largest_remainder(fractions, total):
    raw = np.asarray(fractions, dtype=float) * total
    base = np.floor(raw).astype(int)
    rem = raw - base
    # stable sort keeps index order on ties
    order = sorted(range(len(raw)), key=lambda i: -rem[i])
    for i in order[: total - int(base.sum())]:
        base[i] += 1
    return tuple(int(v) for v in base)


def _block_rotation(n_features, angle):
    Q = np.eye(n_features)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, n_features - 1, 2):
        Q[i : i + 2, i : i + 2] = [[c, -s], [s, c]]
    return Q


class Environment:
    """Three capability task sets with enumerable rewards.

    Reward tables are stored as sub-score arrays of shape (3, T, A) in
    capability order (domain, reasoning, instruction) and combined with
    the current ``RewardWeights`` on demand.
    """

    def __init__(self, spec, rm, tasks):
        self.spec = spec
        self.rm = rm
        self.tasks = {cap: list(tasks[cap]) for cap in CAPABILITIES}
        for cap in CAPABILITIES:
            if not self.tasks[cap]:
                raise DataError(f"capability {cap.value} has no tasks")
        self.X = np.stack(
            [np.stack([np.asarray(t.features, dtype=float) for t in self.tasks[c]]) for c in CAPABILITIES]
        )
        self.r_model = np.stack(
            [model_score_table(np.stack([t.content for t in self.tasks[c]]), rm) for c in CAPABILITIES]
        )
        self.r_format = np.stack(
            [
                np.array([[score_format(t, a) for a in range(spec.n_actions)] for t in self.tasks[c]])
                for c in CAPABILITIES
            ]
        )
        acc = np.zeros_like(self.r_format)
        for ci, c in enumerate(CAPABILITIES):
            for k, t in enumerate(self.tasks[c]):
                acc[ci, k, t.gold_action] = 1.0
        self.r_accuracy = acc

    @property
    def n_tasks(self):
        return self.X.shape[1]

    def contexts(self, cap=None):
        if cap is not None:
            return list(self.tasks[Capability(cap)])
        return [t for c in CAPABILITIES for t in self.tasks[c]]

    def reward_tables(self, weights):
        return composite_table(weights, self.r_model, self.r_format, self.r_accuracy)

    def reward_table(self, cap, weights):
        return self.reward_tables(weights)[Capability(cap).index]

    def subscores(self, ctx, action):
        ci = ctx.capability.index
        return (
            float(self.r_model[ci, ctx.slot, action]),
            float(self.r_format[ci, ctx.slot, action]),
            float(self.r_accuracy[ci, ctx.slot, action]),
        )

    def expected_accuracy(self, params):
        """Exact expected accuracy per capability, in capability order."""
        vals, _ = K.caps_grads(params.matrix, self.X, self.r_accuracy)
        return vals

    def capability_gradients(self, params, weights):
        """Exact (values, gradients) for all three capabilities: (3,), (3, dim)."""
        return K.caps_grads(params.matrix, self.X, self.reward_tables(weights))


def build_environment(spec, rm=None):
    spec.validate()
    T, F, A = spec.tasks_per_capability, spec.n_features, spec.n_actions
    if rm is None:
        rm = RewardModelSpec(seed=spec.seed, content_dim=CONTENT_DIM, n_actions=A)
    if rm.n_actions != A:
        raise ConfigError(f"reward model has {rm.n_actions} actions, env has {A}")
    rng = make_rng(spec.seed, 0)

    base = rng.standard_normal((T, F))
    if F % 2 == 1 and F > 1:
        base[:, -1] = 0.0
    norms = np.linalg.norm(base, axis=1, keepdims=True)
    base /= np.where(norms > 0, norms, 1.0)

    gold = rng.integers(0, A, size=T)
    counts = _largest_remainder(DEFAULT_DIFFICULTY_MIX, T)
    difficulty = np.repeat(np.arange(3), counts)
    difficulty = difficulty[rng.permutation(T)]
    content = rng.standard_normal((T, rm.content_dim))

    constraints = FormatConstraints(stage_count=DEFAULT_STAGE_COUNT, require_answer_tag=True)
    responses = []
    for k in range(T):
        metas = []
        for a in range(A):
            if a == gold[k] or rng.random() < 0.5:
                metas.append(ResponseMeta(DEFAULT_STAGE_COUNT, True))
            else:
                bad_stage = rng.random() < 0.5
                stages = int(rng.choice([2, 4])) if bad_stage else DEFAULT_STAGE_COUNT
                metas.append(ResponseMeta(stages, bad_stage))
        responses.append(tuple(metas))

    phi = float(spec.conflict_strength) * 2.0 * np.pi / 3.0
    tasks = {}
    for ci, cap in enumerate(CAPABILITIES):
        Q = _block_rotation(F, ci * phi)
        feats = base @ Q.T
        tasks[cap] = [
            TaskContext(
                capability=cap,
                features=feats[k],
                gold_action=int(gold[k]),
                difficulty=DIFFICULTIES[int(difficulty[k])],
                slot=k,
                content=content[k],
                constraints=constraints,
                responses=responses[k],
            )
            for k in range(T)
        ]
    return Environment(spec, rm, tasks)


def exact_capability_objective(params, env, cap, weights):
    """Expected composite reward of one capability and its exact gradient."""
    cap = Capability(cap)
    X = env.X[cap.index]
    if X.shape[0] == 0:
        raise DataError(f"capability {cap.value} has no tasks")
    _check_dims(params, X)
    R = env.reward_table(cap, weights)
    value, G = K.objective_grad(params.matrix, X, R)
    return float(value), np.asarray(G).reshape(-1)
