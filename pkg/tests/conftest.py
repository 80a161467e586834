import numpy as np
import pytest
from hypothesis import settings

from capbal.envpolicy import EnvSpec, build_environment, init_policy

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


def central_difference(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.fixture
def small_env():
    spec = EnvSpec(n_features=3, n_actions=4, tasks_per_capability=6, conflict_strength=0.5, seed=3)
    return spec, build_environment(spec)


@pytest.fixture
def random_params(small_env):
    spec, _ = small_env
    rng = np.random.default_rng(11)
    return init_policy(spec, 0).with_theta(rng.standard_normal(spec.dim))
