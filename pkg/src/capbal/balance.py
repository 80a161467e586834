"""Reward-weight controller and gradient-orthogonality monitor."""

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from capbal import _kernels as K
from capbal.errors import ConfigError, DataError
from capbal.reward import ALPHA_BOUNDS, BETA_BOUNDS, RewardWeights

log = logging.getLogger(__name__)

CAP_LABELS = ("domain", "reasoning", "instruction")
PAIRS = ((0, 1), (0, 2), (1, 2))


@dataclass(frozen=True)
class CapabilityScores:
    s_domain: float
    s_reasoning: float
    s_instruction: float

    def __post_init__(self):
        for v in self.as_tuple():
            if not np.isfinite(v) or v < 0:
                raise DataError(f"capability scores must be finite and nonnegative, got {self}")

    def as_tuple(self):
        return (self.s_domain, self.s_reasoning, self.s_instruction)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ControllerConfig:
    balance_threshold: float = 0.85
    alpha_gain: float = 0.1
    delta_beta: float = 0.05
    alpha_bounds: tuple = ALPHA_BOUNDS
    beta_bounds: tuple = BETA_BOUNDS

    def validate(self):
        if not 0.0 < self.balance_threshold < 1.0:
            raise ConfigError("balance_threshold must lie in (0, 1)")
        for name in ("alpha_bounds", "beta_bounds"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"{name} must be ordered, got {(lo, hi)}")
        return self


@dataclass(frozen=True)
class OrthogonalityConfig:
    epsilon: float = 0.01
    check_interval: int = 100
    group_size_cap: int = 32
    penalty_lambda: float = 1.0
    penalty_growth: float = 2.0
    penalty_max: float = 64.0
    fd_step: float = 1e-4
    degenerate_tol: float = 1e-10
    enabled: bool = True

    def validate(self):
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.check_interval < 1:
            raise ConfigError("check_interval must be >= 1")
        if self.penalty_lambda < 0 or self.penalty_max < self.penalty_lambda:
            raise ConfigError("need 0 <= penalty_lambda <= penalty_max")
        if self.penalty_growth < 1:
            raise ConfigError("penalty_growth must be >= 1")
        return self


@dataclass(frozen=True)
class GradientReport:
    pairwise_cosines: tuple
    max_cosine: float
    violated: bool
    degenerate: bool = False

    def to_dict(self):
        return {
            "pairwise_cosines": dict(zip(("D-R", "D-I", "R-I"), self.pairwise_cosines)),
            "max_cosine": self.max_cosine,
            "violated": self.violated,
            "degenerate": self.degenerate,
        }


@dataclass(frozen=True)
class ControllerDecision:
    before: RewardWeights
    after: RewardWeights
    balance: float
    argmin: str | None
    adjusted: bool
    clamped: tuple = field(default_factory=tuple)

    def to_dict(self):
        return {
            "before": self.before.to_dict(),
            "after": self.after.to_dict(),
            "balance": self.balance,
            "argmin": self.argmin,
            "adjusted": self.adjusted,
            "clamped": list(self.clamped),
        }


def gradient_cosine(g_i, g_j, tol=0.0):
    """Normalised inner product; 0.0 when either gradient has norm <= ``tol``."""
    g_i = np.asarray(g_i, dtype=float)
    g_j = np.asarray(g_j, dtype=float)
    if g_i.shape != g_j.shape:
        raise ConfigError(f"gradient shapes differ: {g_i.shape} vs {g_j.shape}")
    ni, nj = np.linalg.norm(g_i), np.linalg.norm(g_j)
    if ni <= tol or nj <= tol:
        return 0.0
    c = float(g_i @ g_j) / (ni * nj)
    return min(1.0, max(-1.0, c))


def orthogonality_check(grads, cfg=OrthogonalityConfig()):
    grads = [np.asarray(g, dtype=float) for g in grads]
    if len(grads) != 3:
        raise ConfigError("orthogonality_check expects one gradient per capability")
    degenerate = any(np.linalg.norm(g) <= cfg.degenerate_tol for g in grads)
    cos = tuple(gradient_cosine(grads[i], grads[j], cfg.degenerate_tol) for i, j in PAIRS)
    mx = max(cos)
    return GradientReport(pairwise_cosines=cos, max_cosine=mx, violated=mx > cfg.epsilon, degenerate=degenerate)


def conflict_penalty(W, Xs, Rs, cfg):
    """sum over pairs of max(0, cos - epsilon)^2 for the exact capability gradients."""
    return float(K.conflict_penalty(W, Xs, Rs, cfg.epsilon, cfg.degenerate_tol))


def conflict_penalty_gradient(W, Xs, Rs, cfg):
    """Central finite-difference gradient of ``conflict_penalty`` w.r.t. theta."""
    return np.asarray(K.conflict_penalty_grad(W, Xs, Rs, cfg.epsilon, cfg.degenerate_tol, cfg.fd_step))


def remediate(report, state, cfg):
    """Escalate: double the group size up to the cap, then switch on / raise the penalty.

    Returns ``(new_state, action)`` where ``action`` names what was done
    (``"grow_group"``, ``"penalty_on"``, ``"penalty_up"`` or ``"none"``).
    """
    if not report.violated:
        return state, "none"
    spec = state.group_spec
    if spec.size < cfg.group_size_cap:
        new_size = min(2 * spec.size, cfg.group_size_cap)
        return replace(state, group_spec=spec.scaled(new_size)), "grow_group"
    lam = state.l2_conflict_penalty
    if lam < cfg.penalty_lambda:
        return replace(state, l2_conflict_penalty=cfg.penalty_lambda), "penalty_on"
    raised = min(lam * cfg.penalty_growth, cfg.penalty_max)
    if raised > lam:
        return replace(state, l2_conflict_penalty=raised), "penalty_up"
    return state, "none"


def balance_score(scores):
    c = np.asarray(scores.as_tuple() if isinstance(scores, CapabilityScores) else scores, dtype=float)
    mu = c.mean()
    if mu <= 0:
        raise DataError(f"balance score needs a positive mean, got {mu}")
    return float(1.0 - c.std() / mu)


def _clamp(v, lo, hi):
    return min(hi, max(lo, v))


def decide(w, scores, cfg=ControllerConfig()):
    """One controller step with its full trace; ``update_weights`` keeps only the weights."""
    w.validate()
    B = balance_score(scores)
    if B >= cfg.balance_threshold:
        return ControllerDecision(before=w, after=w, balance=B, argmin=None, adjusted=False)
    s = np.asarray(scores.as_tuple(), dtype=float)
    m = int(np.argmin(s))  # first minimum -> ties resolve D < R < I
    alpha, b1 = w.alpha, w.beta1
    if m == 0:
        # the min(0.8, .) of the update rule is applied by the clamp below so
        # that saturation shows up in the decision trace
        alpha = alpha + cfg.alpha_gain * (cfg.balance_threshold - B)
    elif m == 1:
        b1 = b1 + cfg.delta_beta
    else:
        b1 = b1 - cfg.delta_beta
    clamped = []
    a_c = _clamp(alpha, *cfg.alpha_bounds)
    if a_c != alpha:
        clamped.append("alpha")
    lo, hi = cfg.beta_bounds
    # beta2 = 1 - beta1, so both betas stay in bounds iff beta1 lies in this range
    b1_lo, b1_hi = max(lo, 1.0 - hi), min(hi, 1.0 - lo)
    b1_c = _clamp(b1, b1_lo, b1_hi)
    if b1_c != b1:
        clamped.append("beta")
    # 1 - 0.9 rounds to 0.09999999999999998; clamp beta2 so it never leaves
    # its bounds by an ulp (the sum still equals 1 to within 1e-15)
    after = RewardWeights(alpha=a_c, beta1=b1_c, beta2=_clamp(1.0 - b1_c, lo, hi))
    if clamped:
        log.info("controller clamped %s: %s -> %s", ",".join(clamped), w, after)
    return ControllerDecision(
        before=w, after=after, balance=B, argmin=CAP_LABELS[m], adjusted=True, clamped=tuple(clamped)
    )


def update_weights(w, scores, cfg=ControllerConfig()):
    return decide(w, scores, cfg).after
