"""Sub-rewards and the hybrid composite reward.

The composite is ``alpha * r_model + (1 - alpha) * (beta1 * r_format +
beta2 * r_accuracy)``. ``beta1 + beta2 = 1`` is kept as an invariant so the
composite stays in [0, 1] whenever the sub-scores do.
"""

from dataclasses import asdict, dataclass

import numpy as np

from capbal._rng import make_rng
from capbal.errors import WeightError

ALPHA_BOUNDS = (0.2, 0.8)
BETA_BOUNDS = (0.1, 0.9)
BETA_SUM_TOL = 1e-9


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = 0.5
    beta1: float = 0.5
    beta2: float = 0.5

    def violations(self):
        out = []
        if not ALPHA_BOUNDS[0] <= self.alpha <= ALPHA_BOUNDS[1]:
            out.append(f"alpha={self.alpha} outside {ALPHA_BOUNDS}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not BETA_BOUNDS[0] <= v <= BETA_BOUNDS[1]:
                out.append(f"{name}={v} outside {BETA_BOUNDS}")
        if abs(self.beta1 + self.beta2 - 1.0) > BETA_SUM_TOL:
            out.append(f"beta1+beta2={self.beta1 + self.beta2} != 1")
        return out

    def validate(self):
        bad = self.violations()
        if bad:
            raise WeightError("; ".join(bad))
        return self

    def as_tuple(self):
        return (self.alpha, self.beta1, self.beta2)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class SubScores:
    r_model: float
    r_format: float
    r_accuracy: float


@dataclass(frozen=True)
class Rollout:
    task: object
    action: int
    subscores: SubScores
    composite: float


@dataclass(frozen=True)
class FormatConstraints:
    """What a well-formed response must declare. ``None`` stage count = unconstrained."""

    stage_count: int | None = 3
    require_answer_tag: bool = True

    def is_empty(self):
        return self.stage_count is None and not self.require_answer_tag


@dataclass(frozen=True)
class ResponseMeta:
    stage_count: int
    answer_tag: bool


@dataclass(frozen=True)
class RewardModelSpec:
    """Frozen stand-in for a learned reward model.

    The hidden scorer is drawn from ``seed``: ``content_dim`` weights for the
    task content vector followed by one weight per action. ``scale = 0``
    gives the all-zero scorer.
    """

    seed: int = 0
    content_dim: int = 4
    n_actions: int = 4
    scale: float = 1.0

    def hidden(self):
        rng = make_rng(self.seed, 7)
        return self.scale * rng.standard_normal(self.content_dim + self.n_actions)

    def to_dict(self):
        return asdict(self)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def score_model(task, action, rm, hidden=None):
    """Sigmoid of the hidden linear scorer over (task content, action one-hot)."""
    h = rm.hidden() if hidden is None else hidden
    content = np.asarray(task.content, dtype=float)
    z = float(h[: rm.content_dim] @ content) + float(h[rm.content_dim + int(action)])
    return float(_sigmoid(z))


def model_score_table(contents, rm):
    """Vectorised ``score_model`` for every (task, action) pair: shape (T, A)."""
    h = rm.hidden()
    contents = np.asarray(contents, dtype=float)
    z = (contents @ h[: rm.content_dim])[:, None] + h[rm.content_dim :][None, :]
    return _sigmoid(z)


def score_format(task, action, response_meta=None):
    if response_meta is None:
        response_meta = task.responses[int(action)]
    c = task.constraints
    if c.stage_count is not None and response_meta.stage_count != c.stage_count:
        return 0.0
    if c.require_answer_tag and not response_meta.answer_tag:
        return 0.0
    return 1.0


def score_accuracy(task, action):
    return 1.0 if int(action) == int(task.gold_action) else 0.0


def composite(weights, s):
    weights.validate()
    a, b1, b2 = weights.alpha, weights.beta1, weights.beta2
    return a * s.r_model + (1.0 - a) * (b1 * s.r_format + b2 * s.r_accuracy)


def composite_table(weights, r_model, r_format, r_accuracy):
    """``composite`` applied elementwise to sub-score arrays."""
    weights.validate()
    a, b1, b2 = weights.alpha, weights.beta1, weights.beta2
    return a * r_model + (1.0 - a) * (b1 * r_format + b2 * r_accuracy)


def score_rollout(task, action, weights, rm, hidden=None):
    s = SubScores(
        r_model=score_model(task, action, rm, hidden),
        r_format=score_format(task, action),
        r_accuracy=score_accuracy(task, action),
    )
    return Rollout(task=task, action=int(action), subscores=s, composite=composite(weights, s))
