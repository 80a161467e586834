"""Integration Score, Pareto archive and the no-common-ascent stationarity check."""

from dataclasses import dataclass

import numpy as np

from capbal.balance import CapabilityScores
from capbal.errors import ConfigError


@dataclass(frozen=True)
class IntegrationConfig:
    """``cf_decimals`` rounds the confidence factor before use (``None`` = exact)."""

    mu_target: float = 70.0
    mu_min_domain: float = 70.0
    cf_decimals: int | None = None

    def confidence_factor(self):
        if self.mu_min_domain <= 0:
            raise ConfigError(f"mu_min_domain must be positive, got {self.mu_min_domain}")
        if self.mu_target <= 0:
            raise ConfigError(f"mu_target must be positive, got {self.mu_target}")
        cf = self.mu_target / self.mu_min_domain
        return round(cf, self.cf_decimals) if self.cf_decimals is not None else cf


# Reference weakest-domain means; the published arithmetic rounds C_f
# (70/49.97 -> 1.401, 70/58.2 -> 1.20), reproduced by cf_decimals.
PRESETS = {
    "comparison": IntegrationConfig(mu_min_domain=49.97, cf_decimals=3),
    "analysis": IntegrationConfig(mu_min_domain=58.2, cf_decimals=2),
    "exact-comparison": IntegrationConfig(mu_min_domain=49.97),
    "exact-analysis": IntegrationConfig(mu_min_domain=58.2),
}


def integration_score(scores, cfg):
    """min(T, D, I) * mu_target / mu_min_domain."""
    vals = scores.as_tuple() if isinstance(scores, CapabilityScores) else tuple(scores)
    return float(min(vals) * cfg.confidence_factor())


def dominates(p, q):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return bool(np.all(p >= q) and np.any(p > q))


@dataclass(frozen=True)
class ParetoArchive:
    points: tuple = ()

    def __len__(self):
        return len(self.points)

    def __contains__(self, p):
        return tuple(p) in self.points


def _as_point(p):
    return tuple(float(v) for v in (p.as_tuple() if isinstance(p, CapabilityScores) else p))


def pareto_update(archive, p):
    p = _as_point(p)
    if any(dominates(q, p) or q == p for q in archive.points):
        return archive
    kept = tuple(q for q in archive.points if not dominates(p, q))
    return ParetoArchive(kept + (p,))


@dataclass(frozen=True)
class ParetoConfig:
    n_directions: int = 256
    tau: float = 1e-4
    step: float = 1e-3
    delta_pareto: float = 1e-4

    def validate(self):
        for name in ("n_directions", "tau", "step", "delta_pareto"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"ParetoConfig.{name} must be positive")
        return self


@dataclass(frozen=True)
class StationarityReport:
    any_common_ascent: bool
    worst_direction: np.ndarray
    best_min_derivative: float

    def to_dict(self):
        return {"any_common_ascent": self.any_common_ascent, "best_min_derivative": self.best_min_derivative}


def common_ascent(grads, cfg, rng):
    """Random-direction search for d with every ``grad . d > tau``.

    ``worst_direction`` is the sampled direction whose smallest directional
    derivative is largest, i.e. the one closest to a common ascent.
    """
    cfg.validate()
    G = np.asarray(grads, dtype=float)
    D = rng.standard_normal((cfg.n_directions, G.shape[1]))
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    mins = (D @ G.T).min(axis=1)
    best = int(np.argmax(mins))
    return StationarityReport(
        any_common_ascent=bool(mins[best] > cfg.tau),
        worst_direction=D[best],
        best_min_derivative=float(mins[best]),
    )


def stationarity_check(params, env, weights, cfg, rng):
    _, G = env.capability_gradients(params, weights)
    return common_ascent(G, cfg, rng)
